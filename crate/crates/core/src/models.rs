//! Phonon Bose-Hubbard chains of trapped ions and long-range transverse-field
//! Ising chains.
//!
//! Phonon models work in units of the transverse trap frequency νx (= 1), spin
//! models in units of the coupling scale J0.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64, ONE, ZERO};
use crate::liouville::{embed_local, Dissipator, Operator, SpaceLayout};

/// Reduced Planck constant in J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Mass of a singly charged ⁴⁰Ca ion in kg.
pub const CALCIUM_40_ION_MASS: f64 = 39.962_590_863 * 1.660_539_066_60e-27 - 9.109_383_701_5e-31;

/// Single-site matrices in the local basis `|0⟩, |1⟩, …` (for spins `|↓⟩, |↑⟩`).
pub mod local {
    use super::*;

    /// Truncated bosonic annihilator `a|n⟩ = √n |n−1⟩`.
    pub fn annihilator(d: usize) -> Array2<C64> {
        Array2::from_shape_fn((d, d), |(i, j)| {
            if j == i + 1 {
                C64::new((j as f64).sqrt(), 0.0)
            } else {
                ZERO
            }
        })
    }

    pub fn number(d: usize) -> Array2<C64> {
        Array2::from_shape_fn((d, d), |(i, j)| if i == j { C64::new(i as f64, 0.0) } else { ZERO })
    }

    /// `σ− = |↓⟩⟨↑|`.
    pub fn sigma_minus() -> Array2<C64> {
        ndarray::array![[ZERO, ONE], [ZERO, ZERO]]
    }

    /// `σ+ = |↑⟩⟨↓|`.
    pub fn sigma_plus() -> Array2<C64> {
        ndarray::array![[ZERO, ZERO], [ONE, ZERO]]
    }

    pub fn sigma_x() -> Array2<C64> {
        ndarray::array![[ZERO, ONE], [ONE, ZERO]]
    }

    pub fn sigma_y() -> Array2<C64> {
        let i = C64::new(0.0, 1.0);
        ndarray::array![[ZERO, i], [-i, ZERO]]
    }

    /// `σz|↓⟩ = −|↓⟩`, `σz|↑⟩ = +|↑⟩`.
    pub fn sigma_z() -> Array2<C64> {
        ndarray::array![[-ONE, ZERO], [ZERO, ONE]]
    }
}

/// Thermal reservoir attached to one ion (0-based site).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bath {
    pub site: usize,
    pub nbar: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhononChainParams {
    pub n_ions: usize,
    /// Squared ratio of axial to transverse trap frequency.
    pub beta0: f64,
    /// On-site anharmonicity `U` of the `U a†²a²` term.
    pub anharmonicity: f64,
    /// Local Fock dimension (levels `0..local_dim`).
    pub local_dim: usize,
    /// Bound on the summed occupation of retained basis states.
    pub excitation_cap: Option<usize>,
    pub baths: Vec<Bath>,
}

impl PhononChainParams {
    /// Closed chain with the default truncation (4 local levels, cap 4).
    pub fn new(n_ions: usize, beta0: f64, anharmonicity: f64) -> Self {
        Self {
            n_ions,
            beta0,
            anharmonicity,
            local_dim: 4,
            excitation_cap: Some(4),
            baths: Vec::new(),
        }
    }

    pub fn with_cutoff(mut self, local_dim: usize, cap: Option<usize>) -> Self {
        self.local_dim = local_dim;
        self.excitation_cap = cap;
        self
    }

    pub fn with_bath(mut self, site: usize, nbar: f64, rate: f64) -> Self {
        self.baths.push(Bath { site, nbar, rate });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ions == 0 {
            return Err(Error::InvalidParameter("chain needs at least one ion".into()));
        }
        if !(self.beta0 > 0.0 && self.beta0 < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta0 must lie in (0, 1), got {}",
                self.beta0
            )));
        }
        if self.beta0 > 0.3 {
            log::warn!("beta0 = {} is outside the weak-coupling regime", self.beta0);
        }
        if self.local_dim < 2 {
            return Err(Error::InvalidParameter("local Fock dimension must be at least 2".into()));
        }
        for b in &self.baths {
            if b.site >= self.n_ions {
                return Err(Error::SiteOutOfRange {
                    site: b.site,
                    n_sites: self.n_ions,
                });
            }
            if !(b.nbar >= 0.0 && b.rate >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "bath on site {} needs nbar, rate >= 0",
                    b.site
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<SpaceLayout> {
        SpaceLayout::new(vec![self.local_dim; self.n_ions], self.excitation_cap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsingChainParams {
    pub n_spins: usize,
    /// Coupling scale.
    pub j0: f64,
    /// Power-law exponent of `J_ij = J0 / |i − j|^exponent`.
    pub exponent: f64,
    /// Transverse field along y.
    pub field: f64,
}

impl IsingChainParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_spins == 0 {
            return Err(Error::InvalidParameter("chain needs at least one spin".into()));
        }
        if !(self.exponent > 0.0 && self.exponent <= 3.0) {
            log::warn!("power-law exponent {} outside (0, 3]", self.exponent);
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<SpaceLayout> {
        SpaceLayout::spins(self.n_spins)
    }
}

/// Dimensionless equilibrium positions of `n` ions in a harmonic trap, ascending.
///
/// Solves `u_m − Σ_{n<m} (u_m−u_n)^{−2} + Σ_{n>m} (u_m−u_n)^{−2} = 0` by damped
/// Newton iteration from a uniform chain.
pub fn equilibrium_positions(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "equilibrium positions need at least 2 ions, got {n}"
        )));
    }
    let spacing = 2.0 / (n as f64).powf(0.56);
    let mut u = Array1::from_iter((0..n).map(|m| (m as f64 - (n as f64 - 1.0) / 2.0) * spacing));

    let force = |u: &Array1<f64>| Array1::from(force_vector(u.as_slice().expect("contiguous")));
    let norm = |f: &Array1<f64>| f.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut f = force(&u);
    for _ in 0..200 {
        if norm(&f) <= 1e-13 {
            break;
        }
        let jac = Array2::from_shape_fn((n, n), |(m, k)| {
            if m == k {
                1.0 + (0..n)
                    .filter(|&j| j != m)
                    .map(|j| 2.0 / (u[m] - u[j]).abs().powi(3))
                    .sum::<f64>()
            } else {
                -2.0 / (u[m] - u[k]).abs().powi(3)
            }
        });
        let step = linalg::solve_real(&jac, &f);
        let mut lambda = 1.0;
        loop {
            let trial = &u - &step.mapv(|x| x * lambda);
            let ordered = trial.windows(2).into_iter().all(|w| w[0] < w[1]);
            if ordered {
                let ft = force(&trial);
                if norm(&ft) < norm(&f) || lambda < 1e-6 {
                    u = trial;
                    f = ft;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-12 {
                return Err(Error::NoConvergence("equilibrium line search stalled".into()));
            }
        }
    }
    if norm(&f) > 1e-12 {
        return Err(Error::NoConvergence(format!(
            "equilibrium residual {:.3e} after 200 Newton steps",
            norm(&f)
        )));
    }
    // exact mirror symmetry
    let sym: Vec<f64> = (0..n).map(|m| 0.5 * (u[m] - u[n - 1 - m])).collect();
    Ok(sym)
}

fn force_vector(u: &[f64]) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|m| {
            let mut f = u[m];
            for k in 0..n {
                if k < m {
                    f -= (u[m] - u[k]).powi(-2);
                } else if k > m {
                    f += (u[m] - u[k]).powi(-2);
                }
            }
            f
        })
        .collect()
}

/// Euclidean norm of the force balance at the given positions.
pub fn force_residual(u: &[f64]) -> f64 {
    force_vector(u).iter().map(|f| f * f).sum::<f64>().sqrt()
}

/// Local trap frequencies `ω_i⁰` and hopping matrix `t_ij` (zero diagonal).
pub fn chain_couplings(n_ions: usize, beta0: f64) -> Result<(Vec<f64>, Array2<f64>)> {
    if n_ions == 1 {
        return Ok((vec![1.0], Array2::zeros((1, 1))));
    }
    let u = equilibrium_positions(n_ions)?;
    let t = Array2::from_shape_fn((n_ions, n_ions), |(i, j)| {
        if i == j {
            0.0
        } else {
            0.5 * beta0 / (u[i] - u[j]).abs().powi(3)
        }
    });
    let omega = (0..n_ions).map(|i| 1.0 - t.row(i).sum()).collect();
    Ok((omega, t))
}

/// `H = Σ ω_i⁰ a_i†a_i + Σ_{i<j} t_ij (a_i†a_j + h.c.) + U Σ a_i†² a_i²`.
pub fn phonon_hamiltonian(params: &PhononChainParams) -> Result<Operator> {
    params.validate()?;
    let layout = params.layout()?;
    let (omega, t) = chain_couplings(params.n_ions, params.beta0)?;
    let d = params.local_dim;
    let a: Vec<Operator> = (0..params.n_ions)
        .map(|i| embed_local(&local::annihilator(d), i, &layout))
        .collect::<Result<_>>()?;
    let n_local = local::number(d);
    let anh_local = n_local.dot(&(&n_local - &linalg::identity(d)));
    let mut h = Array2::<C64>::zeros((layout.dim(), layout.dim()));
    for i in 0..params.n_ions {
        h = h + embed_local(&n_local, i, &layout)?.matrix().mapv(|z| z * omega[i]);
        if params.anharmonicity != 0.0 {
            h = h + embed_local(&anh_local, i, &layout)?
                .matrix()
                .mapv(|z| z * params.anharmonicity);
        }
        for j in i + 1..params.n_ions {
            let hop = a[i].adjoint().matrix().dot(a[j].matrix());
            h = h + (&hop + &linalg::adjoint(&hop)).mapv(|z| z * t[[i, j]]);
        }
    }
    Operator::new(layout, h)
}

/// Lindblad channels of all baths of a phonon chain.
pub fn phonon_dissipators(params: &PhononChainParams, layout: &SpaceLayout) -> Result<Vec<Dissipator>> {
    let mut out = Vec::new();
    for b in &params.baths {
        let a = embed_local(&local::annihilator(params.local_dim), b.site, layout)?;
        out.extend(Dissipator::thermal(&a, b.nbar, b.rate)?);
    }
    Ok(out)
}

/// The single-excitation block: `ω_i⁰` on the diagonal, `t_ij` off it.
pub fn single_exciton_block(params: &PhononChainParams) -> Result<Array2<f64>> {
    let (omega, t) = chain_couplings(params.n_ions, params.beta0)?;
    Ok(t + Array2::from_diag(&Array1::from(omega)))
}

/// Eigenstates of the one- and two-excitation blocks of a phonon chain.
#[derive(Clone, Debug, Serialize)]
pub struct ExcitonTable {
    /// Single-exciton energies `ω_i`, ascending.
    pub single_energies: Vec<f64>,
    /// `single_coeffs[[i, j]]`: amplitude of site `j` in exciton `e_i`.
    pub single_coeffs: Array2<f64>,
    /// Two-exciton energies, ascending.
    pub double_energies: Vec<f64>,
    /// `double_coeffs[i][[j, k]]`: symmetric coefficients with
    /// `|f_i⟩ = Σ_jk d_ijk a_j† a_k† |0⟩`.
    pub double_coeffs: Vec<Array2<f64>>,
    /// Two-exciton eigenvectors over `double_basis`.
    pub double_vectors: Array2<f64>,
    /// Site occupations of the two-excitation basis states.
    pub double_basis: Vec<Vec<usize>>,
    /// Groups of indices sharing an energy within 1e-9 (single, double).
    pub degeneracies: (Vec<Vec<usize>>, Vec<Vec<usize>>),
}

fn fix_signs(vectors: &mut Array2<f64>) {
    for mut col in vectors.columns_mut() {
        if let Some(&first) = col.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                col.mapv_inplace(|x| -x);
            }
        }
    }
}

fn degenerate_groups(e: &[f64]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &x) in e.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if (x - e[*g.last().unwrap()]).abs() < 1e-9 => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups.retain(|g| g.len() > 1);
    groups
}

fn real_block(h: &Operator, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| h.matrix()[[idx[a], idx[b]]].re)
}

pub fn exciton_table(params: &PhononChainParams) -> Result<ExcitonTable> {
    if params.local_dim < 3 || params.excitation_cap.is_some_and(|c| c < 2) {
        return Err(Error::InvalidParameter(
            "two-exciton states need local_dim >= 3 and cap >= 2".into(),
        ));
    }
    let h = phonon_hamiltonian(params)?;
    let layout = h.layout().clone();
    let n = params.n_ions;

    let singles: Vec<usize> = (0..n)
        .map(|j| {
            let mut occ = vec![0; n];
            occ[j] = 1;
            layout.index_of(&occ).expect("single excitations are retained")
        })
        .collect();
    let (e1, mut c1) = linalg::eigh_real(&real_block(&h, &singles))?;
    fix_signs(&mut c1);

    let doubles: Vec<usize> = (0..layout.dim()).filter(|&i| layout.excitation(i) == 2).collect();
    let (e2, mut v2) = linalg::eigh_real(&real_block(&h, &doubles))?;
    fix_signs(&mut v2);
    let double_basis: Vec<Vec<usize>> = doubles.iter().map(|&i| layout.state(i).to_vec()).collect();
    let double_coeffs = (0..doubles.len())
        .map(|f| {
            let mut d = Array2::zeros((n, n));
            for (b, occ) in double_basis.iter().enumerate() {
                let v = v2[[b, f]];
                let sites: Vec<usize> = (0..n).filter(|&j| occ[j] > 0).collect();
                if sites.len() == 1 {
                    d[[sites[0], sites[0]]] = v / std::f64::consts::SQRT_2;
                } else {
                    d[[sites[0], sites[1]]] = v / 2.0;
                    d[[sites[1], sites[0]]] = v / 2.0;
                }
            }
            d
        })
        .collect();

    let single_energies = e1.to_vec();
    let double_energies = e2.to_vec();
    let degeneracies = (degenerate_groups(&single_energies), degenerate_groups(&double_energies));
    Ok(ExcitonTable {
        single_energies,
        single_coeffs: c1.t().to_owned(),
        double_energies,
        double_coeffs,
        double_vectors: v2,
        double_basis,
        degeneracies,
    })
}

/// `H = −Σ_{i<j} J0/|i−j|^p σx^i σx^j − B Σ_i σy^i`.
pub fn ising_hamiltonian(params: &IsingChainParams) -> Result<Operator> {
    params.validate()?;
    let layout = params.layout()?;
    let dim = layout.dim();
    let sx: Vec<Operator> = (0..params.n_spins)
        .map(|i| embed_local(&local::sigma_x(), i, &layout))
        .collect::<Result<_>>()?;
    let mut h = Array2::<C64>::zeros((dim, dim));
    for i in 0..params.n_spins {
        h = h - embed_local(&local::sigma_y(), i, &layout)?
            .matrix()
            .mapv(|z| z * params.field);
        for j in i + 1..params.n_spins {
            let jij = params.j0 / ((j - i) as f64).powf(params.exponent);
            h = h - sx[i].matrix().dot(sx[j].matrix()).mapv(|z| z * jij);
        }
    }
    Operator::new(layout, h)
}

/// Maximal two-photon recoil `ħ(k1² + k2²)/(2m)` as an angular frequency in s⁻¹.
pub fn recoil_energy(lambda1: f64, lambda2: f64, mass: f64) -> Result<f64> {
    if !(lambda1 > 0.0 && lambda2 > 0.0 && mass > 0.0) {
        return Err(Error::InvalidParameter(
            "wavelengths and mass must be positive".into(),
        ));
    }
    let k1 = 2.0 * std::f64::consts::PI / lambda1;
    let k2 = 2.0 * std::f64::consts::PI / lambda2;
    Ok(HBAR * (k1 * k1 + k2 * k2) / (2.0 * mass))
}

/// Either model family, with the pieces the spectroscopy engine needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Model {
    Phonon(PhononChainParams),
    Ising(IsingChainParams),
}

impl Model {
    pub fn n_sites(&self) -> usize {
        match self {
            Model::Phonon(p) => p.n_ions,
            Model::Ising(p) => p.n_spins,
        }
    }

    pub fn is_phonon(&self) -> bool {
        matches!(self, Model::Phonon(_))
    }

    /// Name of the energy unit: `"nu_x"` or `"J0"`.
    pub fn units(&self) -> &'static str {
        match self {
            Model::Phonon(_) => "nu_x",
            Model::Ising(_) => "J0",
        }
    }

    pub fn layout(&self) -> Result<SpaceLayout> {
        match self {
            Model::Phonon(p) => p.layout(),
            Model::Ising(p) => p.layout(),
        }
    }

    pub fn hamiltonian(&self) -> Result<Operator> {
        match self {
            Model::Phonon(p) => phonon_hamiltonian(p),
            Model::Ising(p) => ising_hamiltonian(p),
        }
    }

    pub fn dissipators(&self, layout: &SpaceLayout) -> Result<Vec<Dissipator>> {
        match self {
            Model::Phonon(p) => phonon_dissipators(p, layout),
            Model::Ising(_) => Ok(Vec::new()),
        }
    }

    /// Single-site lowering operator: `a` for ions, `σ−` for spins.
    pub fn lowering_local(&self) -> Array2<C64> {
        match self {
            Model::Phonon(p) => local::annihilator(p.local_dim),
            Model::Ising(_) => local::sigma_minus(),
        }
    }

    /// Total excitation number `Σ_i n_i` in the product basis.
    pub fn excitation_number(&self, layout: &SpaceLayout) -> Operator {
        let d = layout.dim();
        let diag = Array1::from_iter((0..d).map(|i| C64::new(layout.excitation(i) as f64, 0.0)));
        Operator::new(layout.clone(), Array2::from_diag(&diag)).expect("square by construction")
    }
}
