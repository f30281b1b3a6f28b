//! Operators, density matrices and superoperators on truncated product spaces,
//! Lindblad generators, propagation and steady states.
//!
//! Superoperators act on column-stacked density matrices, `vec(ρ)[i + j·D] = ρ[i, j]`,
//! so the map `ρ ↦ X ρ Y†` has matrix `conj(Y) ⊗ X`.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, adjoint, kron, C64, I, ONE, ZERO};

/// Tolerance for the Hermiticity flag of operators.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Tolerance on trace and Hermiticity for physical density matrices.
pub const PHYSICAL_TOL: f64 = 1e-9;
/// Eigenvector condition number above which a block falls back to Padé.
pub const EIGEN_CONDITION_LIMIT: f64 = 1e8;
/// Separation required between the zero eigenvalue and the rest of the spectrum.
pub const STEADY_STATE_GAP: f64 = 1e-10;

struct LayoutInner {
    site_dims: Vec<usize>,
    cap: Option<usize>,
    states: Vec<Vec<usize>>,
    index: HashMap<Vec<usize>, usize>,
}

/// Product basis of a chain of sites, optionally truncated to states whose
/// summed occupation is at most `cap`.
///
/// Basis states are ordered lexicographically in the occupations with site 0
/// most significant, i.e. the Kronecker order of `op_0 ⊗ op_1 ⊗ …` with the
/// retained rows and columns kept. Level 0 is the local ground state (`|↓⟩` for
/// spins, the vacuum for phonons).
#[derive(Clone)]
pub struct SpaceLayout(Arc<LayoutInner>);

impl SpaceLayout {
    pub fn new(site_dims: Vec<usize>, cap: Option<usize>) -> Result<Self> {
        if site_dims.is_empty() {
            return Err(Error::InvalidParameter("layout needs at least one site".into()));
        }
        if let Some(&d) = site_dims.iter().find(|&&d| d < 2) {
            return Err(Error::InvalidParameter(format!(
                "local dimension {d} is below 2"
            )));
        }
        let mut states = Vec::new();
        let mut current = vec![0usize; site_dims.len()];
        loop {
            let total: usize = current.iter().sum();
            if cap.map_or(true, |c| total <= c) {
                states.push(current.clone());
            }
            // odometer increment, last site fastest
            let mut k = site_dims.len();
            loop {
                if k == 0 {
                    let index = states
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (s.clone(), i))
                        .collect();
                    return Ok(Self(Arc::new(LayoutInner {
                        site_dims,
                        cap,
                        states,
                        index,
                    })));
                }
                k -= 1;
                current[k] += 1;
                if current[k] < site_dims[k] {
                    break;
                }
                current[k] = 0;
            }
        }
    }

    /// `n` two-level sites, full product space.
    pub fn spins(n: usize) -> Result<Self> {
        Self::new(vec![2; n], None)
    }

    pub fn site_dims(&self) -> &[usize] {
        &self.0.site_dims
    }

    pub fn n_sites(&self) -> usize {
        self.0.site_dims.len()
    }

    pub fn cap(&self) -> Option<usize> {
        self.0.cap
    }

    /// Number of retained basis states.
    pub fn dim(&self) -> usize {
        self.0.states.len()
    }

    /// Occupations of basis state `i`.
    pub fn state(&self, i: usize) -> &[usize] {
        &self.0.states[i]
    }

    pub fn states(&self) -> &[Vec<usize>] {
        &self.0.states
    }

    pub fn index_of(&self, occupations: &[usize]) -> Option<usize> {
        self.0.index.get(occupations).copied()
    }

    /// Total excitation number of basis state `i`.
    pub fn excitation(&self, i: usize) -> usize {
        self.0.states[i].iter().sum()
    }

    pub(crate) fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.n_sites() {
            return Err(Error::SiteOutOfRange {
                site,
                n_sites: self.n_sites(),
            });
        }
        Ok(())
    }
}

impl PartialEq for SpaceLayout {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
            || (self.0.site_dims == other.0.site_dims && self.0.cap == other.0.cap)
    }
}

impl Eq for SpaceLayout {}

impl fmt::Debug for SpaceLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpaceLayout")
            .field("site_dims", &self.0.site_dims)
            .field("cap", &self.0.cap)
            .field("dim", &self.dim())
            .finish()
    }
}

fn same_layout(a: &SpaceLayout, b: &SpaceLayout) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::LayoutMismatch)
    }
}

/// Dense operator on the truncated basis of a layout.
#[derive(Clone, Debug)]
pub struct Operator {
    layout: SpaceLayout,
    matrix: Array2<C64>,
    hermitian: bool,
}

impl Operator {
    pub fn new(layout: SpaceLayout, matrix: Array2<C64>) -> Result<Self> {
        let d = layout.dim();
        if matrix.dim() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: matrix.nrows(),
            });
        }
        let hermitian = linalg::hermiticity_defect(&matrix) <= HERMITIAN_TOL;
        Ok(Self {
            layout,
            matrix,
            hermitian,
        })
    }

    pub fn zeros(layout: &SpaceLayout) -> Self {
        let d = layout.dim();
        Self {
            layout: layout.clone(),
            matrix: Array2::zeros((d, d)),
            hermitian: true,
        }
    }

    pub fn identity(layout: &SpaceLayout) -> Self {
        Self {
            layout: layout.clone(),
            matrix: linalg::identity(layout.dim()),
            hermitian: true,
        }
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<C64> {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Hermitian within [`HERMITIAN_TOL`] relative Frobenius norm.
    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn adjoint(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            matrix: adjoint(&self.matrix),
            hermitian: self.hermitian,
        }
    }

    fn derived(&self, matrix: Array2<C64>) -> Self {
        let hermitian = linalg::hermiticity_defect(&matrix) <= HERMITIAN_TOL;
        Self {
            layout: self.layout.clone(),
            matrix,
            hermitian,
        }
    }

    pub fn scale(&self, c: C64) -> Self {
        self.derived(self.matrix.mapv(|z| z * c))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Ok(self.derived(&self.matrix + &other.matrix))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Ok(self.derived(&self.matrix - &other.matrix))
    }

    /// Operator product `self · other`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Ok(self.derived(self.matrix.dot(&other.matrix)))
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        let m = self.matrix.dot(&other.matrix) - other.matrix.dot(&self.matrix);
        Ok(self.derived(m))
    }

    /// Hermitian eigendecomposition; fails for non-Hermitian operators.
    pub fn eigh(&self) -> Result<(Array1<f64>, Array2<C64>)> {
        if !self.hermitian {
            return Err(Error::NotHermitian {
                deviation: linalg::hermiticity_defect(&self.matrix),
            });
        }
        linalg::eigh(&self.matrix)
    }
}

/// Embed a single-site operator at `site`, acting as the identity elsewhere and
/// projected onto the retained basis.
pub fn embed_local(local: &Array2<C64>, site: usize, layout: &SpaceLayout) -> Result<Operator> {
    layout.check_site(site)?;
    let d = layout.site_dims()[site];
    if local.dim() != (d, d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: local.nrows(),
        });
    }
    let n = layout.dim();
    let mut matrix = Array2::zeros((n, n));
    let mut target = vec![0usize; layout.n_sites()];
    for col in 0..n {
        let source = layout.state(col);
        target.copy_from_slice(source);
        for level in 0..d {
            let value = local[[level, source[site]]];
            if value == ZERO {
                continue;
            }
            target[site] = level;
            if let Some(row) = layout.index_of(&target) {
                matrix[[row, col]] = value;
            }
        }
    }
    Operator::new(layout.clone(), matrix)
}

/// A density matrix; `physical` marks trace-one Hermitian states as opposed to
/// intermediate objects of a pathway expansion.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    layout: SpaceLayout,
    matrix: Array2<C64>,
    physical: bool,
}

impl DensityMatrix {
    /// Wrap a matrix, classifying it as physical when trace and Hermiticity hold
    /// within [`PHYSICAL_TOL`].
    pub fn new(layout: SpaceLayout, matrix: Array2<C64>) -> Result<Self> {
        let d = layout.dim();
        if matrix.dim() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: matrix.nrows(),
            });
        }
        let trace: C64 = matrix.diag().sum();
        let physical = (trace - ONE).norm() <= PHYSICAL_TOL
            && linalg::hermiticity_defect(&matrix) <= PHYSICAL_TOL;
        Ok(Self {
            layout,
            matrix,
            physical,
        })
    }

    /// Pathway intermediate: no trace or Hermiticity expectations.
    pub fn non_physical(layout: SpaceLayout, matrix: Array2<C64>) -> Result<Self> {
        let mut rho = Self::new(layout, matrix)?;
        rho.physical = false;
        Ok(rho)
    }

    /// `|ψ⟩⟨ψ|` for a normalized copy of `psi`.
    pub fn pure(layout: &SpaceLayout, psi: &Array1<C64>) -> Result<Self> {
        if psi.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                found: psi.len(),
            });
        }
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidParameter("zero state vector".into()));
        }
        let psi = psi.mapv(|z| z / norm);
        let m = Array2::from_shape_fn((psi.len(), psi.len()), |(i, j)| psi[i] * psi[j].conj());
        Self::new(layout.clone(), m)
    }

    /// Projector on the product basis state with the given occupations.
    pub fn basis_state(layout: &SpaceLayout, occupations: &[usize]) -> Result<Self> {
        if occupations.len() != layout.n_sites() {
            return Err(Error::DimensionMismatch {
                expected: layout.n_sites(),
                found: occupations.len(),
            });
        }
        let i = layout.index_of(occupations).ok_or_else(|| {
            Error::InvalidParameter(format!("state {occupations:?} is not in the truncated basis"))
        })?;
        let d = layout.dim();
        let mut m = Array2::zeros((d, d));
        m[[i, i]] = ONE;
        Self::new(layout.clone(), m)
    }

    /// Lowest-energy eigenstate of a Hermitian `h`.
    pub fn ground_state(h: &Operator) -> Result<Self> {
        let (_, vecs) = h.eigh()?;
        Self::pure(h.layout(), &vecs.column(0).to_owned())
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<C64> {
        self.matrix
    }

    pub fn is_physical(&self) -> bool {
        self.physical
    }

    pub fn trace(&self) -> C64 {
        self.matrix.diag().sum()
    }
}

/// `Tr(O ρ)`.
pub fn expectation(o: &Operator, rho: &DensityMatrix) -> Result<C64> {
    same_layout(o.layout(), rho.layout())?;
    Ok(trace_product(o.matrix(), rho.matrix()))
}

/// `Tr(A B)` without forming the product.
pub fn trace_product(a: &Array2<C64>, b: &Array2<C64>) -> C64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += a[[i, k]] * b[[k, i]];
        }
    }
    acc
}

/// Column-stacking vectorization.
pub fn vectorize(m: &Array2<C64>) -> Array1<C64> {
    Array1::from_iter(m.t().iter().copied())
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &Array1<C64>, d: usize) -> Array2<C64> {
    Array2::from_shape_fn((d, d), |(i, j)| v[i + j * d])
}

static GENERATOR_IDS: AtomicU64 = AtomicU64::new(1);

/// Dense superoperator on column-stacked density matrices.
#[derive(Clone, Debug)]
pub struct SuperOperator {
    layout: SpaceLayout,
    matrix: Array2<C64>,
    id: u64,
}

impl SuperOperator {
    pub fn new(layout: SpaceLayout, matrix: Array2<C64>) -> Result<Self> {
        let d2 = layout.dim() * layout.dim();
        if matrix.dim() != (d2, d2) {
            return Err(Error::DimensionMismatch {
                expected: d2,
                found: matrix.nrows(),
            });
        }
        Ok(Self {
            layout,
            matrix,
            id: GENERATOR_IDS.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn identity(layout: &SpaceLayout) -> Self {
        let d2 = layout.dim() * layout.dim();
        Self::new(layout.clone(), linalg::identity(d2)).expect("square by construction")
    }

    /// Superoperator of `ρ ↦ X ρ Y†`.
    pub fn sandwich(x: &Operator, y: &Operator) -> Result<Self> {
        same_layout(x.layout(), y.layout())?;
        let ybar = y.matrix().mapv(|z| z.conj());
        Self::new(x.layout().clone(), kron(&ybar, x.matrix()))
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    /// Identity of this instance, shared by clones; used to key caches.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn apply(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        same_layout(&self.layout, rho.layout())?;
        let v = self.matrix.dot(&vectorize(rho.matrix()));
        DensityMatrix::new(self.layout.clone(), unvectorize(&v, self.layout.dim()))
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Self::new(self.layout.clone(), linalg::matmul(&self.matrix, &other.matrix))
    }
}

/// A Lindblad channel `rate · (L ρ L† − ½{L†L, ρ})`.
#[derive(Clone, Debug)]
pub struct Dissipator {
    jump: Operator,
    rate: f64,
}

impl Dissipator {
    pub fn new(jump: Operator, rate: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dissipation rate must be non-negative, got {rate}"
            )));
        }
        Ok(Self { jump, rate })
    }

    /// The two channels of a thermal bath on a bosonic mode with annihilator `a`:
    /// `a` at rate `γ(n̄+1)` and `a†` at rate `γn̄`.
    pub fn thermal(a: &Operator, nbar: f64, gamma: f64) -> Result<Vec<Self>> {
        if !(nbar >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bath occupation must be non-negative, got {nbar}"
            )));
        }
        let mut out = vec![Self::new(a.clone(), gamma * (nbar + 1.0))?];
        if nbar > 0.0 {
            out.push(Self::new(a.adjoint(), gamma * nbar)?);
        }
        Ok(out)
    }

    pub fn jump(&self) -> &Operator {
        &self.jump
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// Lindblad generator `Λρ = −i[H, ρ] + Σ_k rate_k (L_k ρ L_k† − ½{L_k†L_k, ρ})`,
/// with propagation `ρ(t) = e^{Λt} ρ(0)`.
pub fn build_generator(h: &Operator, dissipators: &[Dissipator]) -> Result<SuperOperator> {
    if !h.is_hermitian() {
        return Err(Error::NotHermitian {
            deviation: linalg::hermiticity_defect(h.matrix()),
        });
    }
    let layout = h.layout();
    let d = layout.dim();
    let id = linalg::identity(d);
    let mi = C64::new(0.0, -1.0);
    let mut lam = kron(&id, h.matrix()).mapv(|z| z * mi)
        + kron(&h.matrix().t().to_owned(), &id).mapv(|z| z * I);
    for diss in dissipators {
        same_layout(layout, diss.jump.layout())?;
        if diss.rate == 0.0 {
            continue;
        }
        let l = diss.jump.matrix();
        let ldl = adjoint(l).dot(l);
        let r = diss.rate;
        lam = lam + kron(&l.mapv(|z| z.conj()), l).mapv(|z| z * r)
            - kron(&id, &ldl).mapv(|z| z * (0.5 * r))
            - kron(&ldl.t().to_owned(), &id).mapv(|z| z * (0.5 * r));
    }
    SuperOperator::new(layout.clone(), lam)
}

/// Index sets of the connected components of a matrix's sparsity graph,
/// each sorted, ordered by smallest member.
pub(crate) fn connected_blocks(m: &Array2<C64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for ((i, j), z) in m.indexed_iter() {
        if i != j && *z != ZERO {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut blocks: Vec<Vec<usize>> = groups.into_values().collect();
    blocks.sort_by_key(|b| b[0]);
    blocks
}

fn submatrix(m: &Array2<C64>, idx: &[usize]) -> Array2<C64> {
    Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| m[[idx[a], idx[b]]])
}

/// How a block exponential is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpMethod {
    Eigen,
    Pade,
}

struct Block {
    indices: Vec<usize>,
    generator: Array2<C64>,
    eigen: Option<(Array1<C64>, Array2<C64>, Array2<C64>)>,
}

impl Block {
    fn new(indices: Vec<usize>, generator: Array2<C64>) -> Result<Self> {
        let (vals, vecs) = linalg::eig(&generator)?;
        let inv = linalg::inverse(&vecs);
        let cond = linalg::frobenius_norm(vecs.view()) * linalg::frobenius_norm(inv.view());
        let mut eigen = None;
        if cond.is_finite() && cond < EIGEN_CONDITION_LIMIT {
            let rebuilt = linalg::matmul(&(&vecs * &vals.view().insert_axis(ndarray::Axis(0))), &inv);
            let scale = linalg::frobenius_norm(generator.view()).max(1e-300);
            let residual = linalg::frobenius_norm((&rebuilt - &generator).view()) / scale;
            if residual < 1e-10 {
                eigen = Some((vals, vecs, inv));
            }
        }
        Ok(Self {
            indices,
            generator,
            eigen,
        })
    }

    fn method(&self) -> ExpMethod {
        if self.eigen.is_some() {
            ExpMethod::Eigen
        } else {
            ExpMethod::Pade
        }
    }

    fn exp(&self, t: f64) -> Array2<C64> {
        match &self.eigen {
            Some((vals, vecs, inv)) => {
                let phases = vals.mapv(|l| (l * t).exp());
                linalg::matmul(&(vecs * &phases.view().insert_axis(ndarray::Axis(0))), inv)
            }
            None => linalg::expm(&self.generator.mapv(|z| z * t)),
        }
    }

    fn eigenvalues(&self) -> Result<Vec<C64>> {
        match &self.eigen {
            Some((vals, _, _)) => Ok(vals.to_vec()),
            None => linalg::eigenvalues(&self.generator),
        }
    }
}

enum Evolution {
    /// `U(t) = W e^{−iEt} W†`.
    Unitary { energies: Array1<f64>, vectors: Array2<C64> },
    /// Block-diagonal Liouvillian in the vectorized representation.
    Lindblad { blocks: Vec<Block> },
}

enum Step {
    Unitary(Array2<C64>),
    Blocks(Vec<Array2<C64>>),
}

/// Free evolution `e^{Λt}` with a write-once cache keyed by time.
///
/// Closed systems propagate as `U ρ U†`; open ones use the connected blocks of
/// the generator, each exponentiated by eigendecomposition when its eigenvector
/// matrix is well conditioned and by Padé scaling-and-squaring otherwise.
pub struct Propagator {
    layout: SpaceLayout,
    evolution: Evolution,
    generator: Option<SuperOperator>,
    cache: RwLock<HashMap<u64, Arc<Step>>>,
}

impl fmt::Debug for Propagator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Propagator")
            .field("layout", &self.layout)
            .field("method", &self.method())
            .finish()
    }
}

impl Propagator {
    /// Unitary evolution under `h`.
    pub fn closed(h: &Operator) -> Result<Self> {
        let (energies, vectors) = h.eigh()?;
        Ok(Self {
            layout: h.layout().clone(),
            evolution: Evolution::Unitary { energies, vectors },
            generator: None,
            cache: RwLock::new(HashMap::new()),
        })
    }

    /// Evolution under an arbitrary generator.
    pub fn open(generator: &SuperOperator) -> Result<Self> {
        let m = generator.matrix();
        let blocks = connected_blocks(m)
            .into_par_iter()
            .map(|idx| {
                let g = submatrix(m, &idx);
                Block::new(idx, g)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layout: generator.layout().clone(),
            evolution: Evolution::Lindblad { blocks },
            generator: Some(generator.clone()),
            cache: RwLock::new(HashMap::new()),
        })
    }

    /// Closed evolution when there is no active dissipator, otherwise open.
    pub fn for_model(h: &Operator, dissipators: &[Dissipator]) -> Result<Self> {
        if dissipators.iter().all(|d| d.rate() == 0.0) {
            Self::closed(h)
        } else {
            Self::open(&build_generator(h, dissipators)?)
        }
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn is_closed(&self) -> bool {
        matches!(self.evolution, Evolution::Unitary { .. })
    }

    /// `"unitary"`, `"eigen"`, `"pade"` or `"mixed"`.
    pub fn method(&self) -> &'static str {
        match &self.evolution {
            Evolution::Unitary { .. } => "unitary",
            Evolution::Lindblad { blocks } => {
                let eigen = blocks.iter().filter(|b| b.method() == ExpMethod::Eigen).count();
                if eigen == blocks.len() {
                    "eigen"
                } else if eigen == 0 {
                    "pade"
                } else {
                    "mixed"
                }
            }
        }
    }

    /// Sizes of the independent blocks of the vectorized generator.
    pub fn block_sizes(&self) -> Vec<usize> {
        match &self.evolution {
            Evolution::Unitary { energies, .. } => vec![energies.len() * energies.len()],
            Evolution::Lindblad { blocks } => blocks.iter().map(|b| b.indices.len()).collect(),
        }
    }

    fn step(&self, t: f64) -> Result<Arc<Step>> {
        if t < 0.0 || t.is_nan() {
            return Err(Error::NegativeTime(t));
        }
        let key = t.to_bits();
        if let Some(s) = self.cache.read().expect("cache lock poisoned").get(&key) {
            return Ok(Arc::clone(s));
        }
        let step = match &self.evolution {
            Evolution::Unitary { energies, vectors } => {
                let phases = energies.mapv(|e| C64::from_polar(1.0, -e * t));
                let scaled = vectors * &phases.view().insert_axis(ndarray::Axis(0));
                Step::Unitary(linalg::matmul(&scaled, &adjoint(vectors)))
            }
            Evolution::Lindblad { blocks } => {
                Step::Blocks(blocks.par_iter().map(|b| b.exp(t)).collect())
            }
        };
        let mut cache = self.cache.write().expect("cache lock poisoned");
        Ok(Arc::clone(cache.entry(key).or_insert_with(|| Arc::new(step))))
    }

    /// `e^{Λt} ρ` for a (not necessarily physical) density matrix.
    pub fn evolve(&self, rho: &Array2<C64>, t: f64) -> Result<Array2<C64>> {
        self.check_dim(rho)?;
        let step = self.step(t)?;
        Ok(match (&*step, &self.evolution) {
            (Step::Unitary(u), _) => u.dot(rho).dot(&adjoint(u)),
            (Step::Blocks(gs), Evolution::Lindblad { blocks }) => {
                let d = rho.nrows();
                let v = vectorize(rho);
                let mut out = Array1::zeros(d * d);
                for (b, g) in blocks.iter().zip(gs) {
                    let x = Array1::from_iter(b.indices.iter().map(|&i| v[i]));
                    let y = g.dot(&x);
                    for (k, &i) in b.indices.iter().enumerate() {
                        out[i] = y[k];
                    }
                }
                unvectorize(&out, d)
            }
            _ => unreachable!("step kind follows evolution kind"),
        })
    }

    /// Heisenberg-picture evolution: returns `M'` with `Tr(M' ρ) = Tr(M e^{Λt} ρ)`
    /// for every `ρ`.
    pub fn evolve_dual(&self, m: &Array2<C64>, t: f64) -> Result<Array2<C64>> {
        self.check_dim(m)?;
        let step = self.step(t)?;
        Ok(match (&*step, &self.evolution) {
            (Step::Unitary(u), _) => adjoint(u).dot(m).dot(u),
            (Step::Blocks(gs), Evolution::Lindblad { blocks }) => {
                let d = m.nrows();
                let v = vectorize(&m.t().to_owned());
                let mut out = Array1::zeros(d * d);
                for (b, g) in blocks.iter().zip(gs) {
                    let x = Array1::from_iter(b.indices.iter().map(|&i| v[i]));
                    let y = g.t().dot(&x);
                    for (k, &i) in b.indices.iter().enumerate() {
                        out[i] = y[k];
                    }
                }
                unvectorize(&out, d).t().to_owned()
            }
            _ => unreachable!("step kind follows evolution kind"),
        })
    }

    /// Dense `e^{Λt}`.
    pub fn superoperator(&self, t: f64) -> Result<SuperOperator> {
        let step = self.step(t)?;
        let d = self.layout.dim();
        let m = match (&*step, &self.evolution) {
            (Step::Unitary(u), _) => kron(&u.mapv(|z| z.conj()), u),
            (Step::Blocks(gs), Evolution::Lindblad { blocks }) => {
                let mut m = Array2::zeros((d * d, d * d));
                for (b, g) in blocks.iter().zip(gs) {
                    for (p, &i) in b.indices.iter().enumerate() {
                        for (q, &j) in b.indices.iter().enumerate() {
                            m[[i, j]] = g[[p, q]];
                        }
                    }
                }
                m
            }
            _ => unreachable!("step kind follows evolution kind"),
        };
        SuperOperator::new(self.layout.clone(), m)
    }

    /// Eigen-mode decomposition of `Tr(M e^{Λt} X)` as `Σ_μ w_μ e^{λ_μ t}`.
    ///
    /// Closed systems give `λ = −i(E_a − E_b)` for the coherence `|a⟩⟨b|`.
    /// Blocks evaluated by Padé have no usable eigenbasis and are reported as an
    /// error.
    pub fn modes(&self, m: &Array2<C64>, x: &Array2<C64>) -> Result<Vec<(C64, C64)>> {
        self.check_dim(m)?;
        self.check_dim(x)?;
        match &self.evolution {
            Evolution::Unitary { energies, vectors } => {
                let wd = adjoint(vectors);
                let xt = wd.dot(x).dot(vectors);
                let mt = wd.dot(m).dot(vectors);
                let n = energies.len();
                let mut out = Vec::with_capacity(n * n);
                for a in 0..n {
                    for b in 0..n {
                        let w = mt[[b, a]] * xt[[a, b]];
                        out.push((C64::new(0.0, -(energies[a] - energies[b])), w));
                    }
                }
                Ok(out)
            }
            Evolution::Lindblad { blocks } => {
                let d = m.nrows();
                let vx = vectorize(x);
                let vm = vectorize(&m.t().to_owned());
                let mut out = Vec::new();
                for b in blocks {
                    let (vals, vecs, inv) = b.eigen.as_ref().ok_or_else(|| {
                        Error::Linalg("modal decomposition needs a diagonalizable generator".into())
                    })?;
                    let xb = Array1::from_iter(b.indices.iter().map(|&i| vx[i]));
                    let mb = Array1::from_iter(b.indices.iter().map(|&i| vm[i]));
                    let right = inv.dot(&xb);
                    let left = vecs.t().dot(&mb);
                    for mu in 0..vals.len() {
                        out.push((vals[mu], left[mu] * right[mu]));
                    }
                }
                debug_assert_eq!(out.len(), d * d);
                Ok(out)
            }
        }
    }

    fn check_dim(&self, m: &Array2<C64>) -> Result<()> {
        let d = self.layout.dim();
        if m.dim() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: m.nrows(),
            });
        }
        Ok(())
    }

    /// The generator this propagator was built from, if open.
    pub fn generator(&self) -> Option<&SuperOperator> {
        self.generator.as_ref()
    }

    /// Unique stationary state of an open generator.
    pub fn steady_state(&self) -> Result<DensityMatrix> {
        match &self.evolution {
            Evolution::Unitary { .. } => Err(Error::NoUniqueSteadyState(
                "closed evolution keeps every energy eigenprojector stationary".into(),
            )),
            Evolution::Lindblad { blocks } => steady_state_from_blocks(&self.layout, blocks),
        }
    }
}

/// `e^{Λt}` as a dense superoperator.
pub fn propagator(generator: &SuperOperator, t: f64) -> Result<SuperOperator> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeTime(t));
    }
    Propagator::open(generator)?.superoperator(t)
}

/// Trace-one Hermitian null vector of `generator`.
pub fn steady_state(generator: &SuperOperator) -> Result<DensityMatrix> {
    Propagator::open(generator)?.steady_state()
}

fn steady_state_from_blocks(layout: &SpaceLayout, blocks: &[Block]) -> Result<DensityMatrix> {
    let mut spectrum: Vec<(f64, f64, usize)> = Vec::new();
    for (k, b) in blocks.iter().enumerate() {
        for l in b.eigenvalues()? {
            spectrum.push((l.re.abs(), l.norm(), k));
        }
    }
    spectrum.sort_by(|a, b| a.0.total_cmp(&b.0));
    if spectrum.len() < 2 || spectrum[1].0 <= STEADY_STATE_GAP {
        return Err(Error::NoUniqueSteadyState(format!(
            "second smallest |Re λ| is {:.3e}",
            spectrum.get(1).map_or(0.0, |s| s.0)
        )));
    }
    let block = &blocks[spectrum[0].2];
    let d = layout.dim();
    // null vector of the block: fix the component with the largest diagonal weight
    // through the trace condition and solve the remaining rows
    let n = block.indices.len();
    let diag_positions: Vec<usize> = (0..n)
        .filter(|&p| block.indices[p] % (d + 1) == 0)
        .collect();
    if diag_positions.is_empty() {
        return Err(Error::NoUniqueSteadyState(
            "zero mode carries no population".into(),
        ));
    }
    let mut a = block.generator.clone();
    let mut rhs = Array2::zeros((n, 1));
    let row = diag_positions[0];
    for q in 0..n {
        a[[row, q]] = ZERO;
    }
    for &p in &diag_positions {
        a[[row, p]] = ONE;
    }
    rhs[[row, 0]] = ONE;
    let x = linalg::solve(&a, &rhs);
    let mut v = Array1::zeros(d * d);
    for (p, &i) in block.indices.iter().enumerate() {
        v[i] = x[[p, 0]];
    }
    let raw = unvectorize(&v, d);
    let herm = (&raw + &adjoint(&raw)).mapv(|z| z * 0.5);
    let tr: C64 = herm.diag().sum();
    let rho = herm.mapv(|z| z / tr);
    let lv = vectorize(&rho);
    let mut residual = 0.0f64;
    for b in blocks {
        let x = Array1::from_iter(b.indices.iter().map(|&i| lv[i]));
        let y = b.generator.dot(&x);
        residual += y.iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    let residual = residual.sqrt();
    if residual > 1e-9 {
        return Err(Error::NoUniqueSteadyState(format!(
            "null vector residual {residual:.3e}"
        )));
    }
    DensityMatrix::new(layout.clone(), rho)
}

/// Stationary state by propagating `rho0` for long times until successive
/// samples agree within `tol`; fallback for generators with a poorly resolved gap.
pub fn steady_state_by_propagation(
    prop: &Propagator,
    rho0: &DensityMatrix,
    step: f64,
    max_steps: usize,
    tol: f64,
) -> Result<DensityMatrix> {
    let mut rho = rho0.matrix().clone();
    for _ in 0..max_steps {
        let next = prop.evolve(&rho, step)?;
        let change = linalg::frobenius_norm((&next - &rho).view());
        rho = next;
        if change < tol {
            return DensityMatrix::new(prop.layout().clone(), rho);
        }
    }
    Err(Error::NoConvergence(format!(
        "state still changing after {max_steps} steps of {step}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn annihilator(d: usize) -> Array2<C64> {
        Array2::from_shape_fn((d, d), |(i, j)| {
            if j == i + 1 {
                c((j as f64).sqrt())
            } else {
                ZERO
            }
        })
    }

    #[test]
    fn truncated_basis_is_lexicographic_and_capped() {
        let l = SpaceLayout::new(vec![3, 3], Some(2)).unwrap();
        let expected: Vec<Vec<usize>> = vec![
            vec![0, 0],
            vec![0, 1],
            vec![0, 2],
            vec![1, 0],
            vec![1, 1],
            vec![2, 0],
        ];
        assert_eq!(l.states(), &expected[..]);
    }

    #[test]
    fn embed_annihilator_has_sqrt_n_entries() {
        let l = SpaceLayout::new(vec![3, 3], Some(2)).unwrap();
        let a = embed_local(&annihilator(3), 0, &l).unwrap();
        for col in 0..l.dim() {
            let s = l.state(col).to_vec();
            for row in 0..l.dim() {
                let t = l.state(row);
                let expected = if s[0] >= 1 && t[0] == s[0] - 1 && t[1] == s[1] {
                    (s[0] as f64).sqrt()
                } else {
                    0.0
                };
                assert_eq!(a.matrix()[[row, col]], c(expected));
            }
        }
    }

    #[test]
    fn embed_rejects_bad_site_and_dimension() {
        let l = SpaceLayout::spins(2).unwrap();
        assert!(matches!(
            embed_local(&linalg::identity(2), 2, &l),
            Err(Error::SiteOutOfRange { .. })
        ));
        assert!(matches!(
            embed_local(&linalg::identity(3), 0, &l),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn closed_generator_is_commutator() {
        let l = SpaceLayout::spins(1).unwrap();
        let h = Operator::new(l.clone(), array![[c(0.3), C64::new(0.1, -0.2)], [C64::new(0.1, 0.2), c(-1.0)]]).unwrap();
        let g = build_generator(&h, &[]).unwrap();
        let rho = DensityMatrix::new(l, array![[c(0.7), C64::new(0.1, 0.3)], [C64::new(0.1, -0.3), c(0.3)]]).unwrap();
        let out = g.apply(&rho).unwrap();
        let expected = (h.matrix().dot(rho.matrix()) - rho.matrix().dot(h.matrix())).mapv(|z| z * C64::new(0.0, -1.0));
        assert!((out.matrix() - &expected).iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn sandwich_matches_x_rho_y_dagger() {
        let l = SpaceLayout::spins(1).unwrap();
        let x = Operator::new(l.clone(), array![[c(1.0), C64::new(0.0, 2.0)], [c(0.5), c(-1.0)]]).unwrap();
        let y = Operator::new(l.clone(), array![[C64::new(0.2, 0.1), c(0.0)], [c(3.0), C64::new(0.0, 1.0)]]).unwrap();
        let rho = DensityMatrix::non_physical(l, array![[c(1.0), c(2.0)], [C64::new(0.0, 1.0), c(4.0)]]).unwrap();
        let s = SuperOperator::sandwich(&x, &y).unwrap();
        let out = s.apply(&rho).unwrap();
        let expected = x.matrix().dot(rho.matrix()).dot(&adjoint(y.matrix()));
        assert!((out.matrix() - &expected).iter().all(|z| z.norm() < 1e-13));
    }

    #[test]
    fn thermal_mode_relaxes_to_bose_distribution() {
        let d = 30;
        let l = SpaceLayout::new(vec![d], None).unwrap();
        let a = embed_local(&annihilator(d), 0, &l).unwrap();
        let n = a.adjoint().compose(&a).unwrap();
        let diss = Dissipator::thermal(&a, 0.5, 0.01).unwrap();
        let g = build_generator(&n, &diss).unwrap();
        let rho = steady_state(&g).unwrap();
        assert!(rho.is_physical());
        let mean = expectation(&n, &rho).unwrap();
        assert!((mean.re - 0.5).abs() < 1e-6, "{mean}");
        let ratio = 0.5 / 1.5;
        for k in 1..6 {
            let r = rho.matrix()[[k, k]].re / rho.matrix()[[k - 1, k - 1]].re;
            assert!((r - ratio).abs() < 1e-8);
        }
    }

    #[test]
    fn closed_system_has_no_unique_steady_state() {
        let l = SpaceLayout::spins(1).unwrap();
        let h = Operator::new(l, array![[c(-1.0), ZERO], [ZERO, c(1.0)]]).unwrap();
        let g = build_generator(&h, &[]).unwrap();
        assert!(matches!(steady_state(&g), Err(Error::NoUniqueSteadyState(_))));
    }

    #[test]
    fn negative_time_rejected() {
        let l = SpaceLayout::spins(1).unwrap();
        let g = build_generator(&Operator::zeros(&l), &[]).unwrap();
        assert!(matches!(propagator(&g, -1.0), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn dual_evolution_matches_forward_trace() {
        let d = 4;
        let l = SpaceLayout::new(vec![d], None).unwrap();
        let a = embed_local(&annihilator(d), 0, &l).unwrap();
        let h = a.adjoint().compose(&a).unwrap().add(&a.add(&a.adjoint()).unwrap().scale(c(0.3))).unwrap();
        let diss = Dissipator::thermal(&a, 0.2, 0.1).unwrap();
        let prop = Propagator::for_model(&h, &diss).unwrap();
        let rho = Array2::from_shape_fn((d, d), |(i, j)| C64::new((i + 2 * j) as f64, (i as f64) - (j as f64)));
        let m = Array2::from_shape_fn((d, d), |(i, j)| C64::new((i * j) as f64 * 0.1, 0.3 * i as f64));
        let t = 1.7;
        let forward = trace_product(&m, &prop.evolve(&rho, t).unwrap());
        let backward = trace_product(&prop.evolve_dual(&m, t).unwrap(), &rho);
        assert!((forward - backward).norm() < 1e-10 * forward.norm().max(1.0));
        let modes: C64 = prop
            .modes(&m, &rho)
            .unwrap()
            .into_iter()
            .map(|(l, w)| w * (l * t).exp())
            .sum();
        assert!((modes - forward).norm() < 1e-9 * forward.norm().max(1.0));
    }
}
