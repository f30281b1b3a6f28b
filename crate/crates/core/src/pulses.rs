//! Impulsive interactions `V = α𝕀 + β e^{iφ} A† + γ e^{−iφ} A` and readout
//! observables.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64, ZERO};
use crate::liouville::{embed_local, Operator, SpaceLayout};
use crate::models::local;

/// Which ladder operator `A` lowers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeKind {
    /// `A = a`, the phonon annihilator.
    PhononLadder,
    /// `A = σ−`.
    SpinLadder,
}

/// One impulsive pulse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    /// `(site, weight)` pairs; `A = Σ weight · A_site`.
    pub sites: Vec<(usize, f64)>,
    pub mode: ModeKind,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Name of the phase variable this pulse's `φ` is bound to.
    pub phase_var: String,
    /// Drop the two-arrow terms `A†ρA` etc. and the `|β|², |γ|², βγ` products.
    pub linearized: bool,
}

impl Interaction {
    pub fn new(
        sites: Vec<(usize, f64)>,
        mode: ModeKind,
        alpha: f64,
        beta: f64,
        gamma: f64,
        phase_var: impl Into<String>,
        linearized: bool,
    ) -> Result<Self> {
        if beta == 0.0 && gamma == 0.0 {
            return Err(Error::InvalidParameter(
                "interaction needs a nonzero beta or gamma".into(),
            ));
        }
        if ![alpha, beta, gamma].iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidParameter("amplitudes must be finite".into()));
        }
        if sites.is_empty() {
            return Err(Error::InvalidParameter("interaction needs a site".into()));
        }
        Ok(Self {
            sites,
            mode,
            alpha,
            beta,
            gamma,
            phase_var: phase_var.into(),
            linearized,
        })
    }

    /// The single-site site index, or the first site of a collective pulse.
    pub fn site(&self) -> usize {
        self.sites[0].0
    }

    /// Check that the addressed sites exist and carry the right kind of mode.
    pub fn check_layout(&self, layout: &SpaceLayout, spins: bool) -> Result<()> {
        for &(s, _) in &self.sites {
            layout.check_site(s)?;
        }
        match (self.mode, spins) {
            (ModeKind::SpinLadder, false) => Err(Error::InvalidParameter(
                "spin pulse addressed to a phonon site".into(),
            )),
            (ModeKind::PhononLadder, true) => Err(Error::InvalidParameter(
                "phonon pulse addressed to a spin site".into(),
            )),
            _ => Ok(()),
        }
    }

    /// The lowering operator `A` on `layout`.
    pub fn lowering(&self, layout: &SpaceLayout) -> Result<Operator> {
        let mut a = Operator::zeros(layout);
        for &(s, w) in &self.sites {
            layout.check_site(s)?;
            let d = layout.site_dims()[s];
            let m = match self.mode {
                ModeKind::PhononLadder => local::annihilator(d),
                ModeKind::SpinLadder => local::sigma_minus(),
            };
            a = a.add(&embed_local(&m, s, layout)?.scale(C64::new(w, 0.0)))?;
        }
        Ok(a)
    }

    /// `V(φ)`; meaningful as a map `VρV†` only when not linearized.
    pub fn operator(&self, layout: &SpaceLayout, phi: f64) -> Result<Operator> {
        let a = self.lowering(layout)?;
        let up = C64::from_polar(self.beta, phi);
        let down = C64::from_polar(self.gamma, -phi);
        let m = linalg::identity(layout.dim()).mapv(|z| z * self.alpha)
            + linalg::adjoint(a.matrix()).mapv(|z| z * up)
            + a.matrix().mapv(|z| z * down);
        Operator::new(layout.clone(), m)
    }

    /// `𝒱(φ)ρ`: `VρV†`, or its expansion to first order in `β, γ` when linearized.
    pub fn apply(&self, layout: &SpaceLayout, rho: &Array2<C64>, phi: f64) -> Result<Array2<C64>> {
        let v = self.operator(layout, phi)?;
        if !self.linearized {
            return Ok(v.matrix().dot(rho).dot(&linalg::adjoint(v.matrix())));
        }
        // α²ρ + α[(V − α)ρ + ρ(V − α)†]
        let k = v.matrix() - &linalg::identity(layout.dim()).mapv(|z| z * self.alpha);
        let first = k.dot(rho) + rho.dot(&linalg::adjoint(&k));
        Ok(rho.mapv(|z| z * self.alpha * self.alpha) + first.mapv(|z| z * self.alpha))
    }
}

/// General `α𝕀 + βe^{iφ}A† + γe^{−iφ}A` on one site.
pub fn generic_interaction(
    site: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    phase_var: &str,
    mode: ModeKind,
) -> Result<Interaction> {
    Interaction::new(vec![(site, 1.0)], mode, alpha, beta, gamma, phase_var, false)
}

/// π/2 carrier pulse: `α = β = 1/√2`, `γ = −1/√2`, `A = σ−`.
pub fn spin_pi2(site: usize, phase_var: &str) -> Result<Interaction> {
    Interaction::new(
        vec![(site, 1.0)],
        ModeKind::SpinLadder,
        FRAC_1_SQRT_2,
        FRAC_1_SQRT_2,
        -FRAC_1_SQRT_2,
        phase_var,
        false,
    )
}

/// Weak motional displacement to first order: `α = 1`, `β = ε`, `γ = −ε`.
pub fn weak_displacement(site: usize, epsilon: f64, phase_var: &str) -> Result<Interaction> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "displacement amplitude must be positive, got {epsilon}"
        )));
    }
    if epsilon > 0.3 {
        log::warn!("displacement amplitude {epsilon} is not small; linearization is poor");
    }
    Interaction::new(
        vec![(site, 1.0)],
        ModeKind::PhononLadder,
        1.0,
        epsilon,
        -epsilon,
        phase_var,
        true,
    )
}

/// Identity weight of the effective raise/lower operators `V±`.
pub const SELECTIVE_ALPHA: f64 = FRAC_1_SQRT_2;
/// Default transition amplitude of `V±`.
pub const SELECTIVE_AMPLITUDE: f64 = FRAC_1_SQRT_2;

/// `V+ = α𝕀 + βe^{iφ}a†` on a phonon site.
pub fn raise_only(site: usize, beta: f64, phase_var: &str) -> Result<Interaction> {
    Interaction::new(
        vec![(site, 1.0)],
        ModeKind::PhononLadder,
        SELECTIVE_ALPHA,
        beta,
        0.0,
        phase_var,
        false,
    )
}

/// `V− = α𝕀 + γe^{−iφ}a` on a phonon site.
pub fn lower_only(site: usize, gamma: f64, phase_var: &str) -> Result<Interaction> {
    Interaction::new(
        vec![(site, 1.0)],
        ModeKind::PhononLadder,
        SELECTIVE_ALPHA,
        0.0,
        gamma,
        phase_var,
        false,
    )
}

/// Carrier rotation `cos(Ωt/2)𝕀 − i sin(Ωt/2)(e^{iϕ}σ+ + e^{−iϕ}σ−)` on one spin.
pub fn carrier_unitary(omega: f64, t: f64, varphi: f64) -> Array2<C64> {
    let theta = omega * t / 2.0;
    let mi = C64::new(0.0, -1.0);
    let flip = local::sigma_plus().mapv(|z| z * C64::from_polar(1.0, varphi))
        + local::sigma_minus().mapv(|z| z * C64::from_polar(1.0, -varphi));
    linalg::identity(2).mapv(|z| z * theta.cos()) + flip.mapv(|z| z * mi * theta.sin())
}

/// Phase offset between the carrier phase ϕ and the pulse phase φ = ϕ − π/2.
pub const CARRIER_PHASE_OFFSET: f64 = FRAC_PI_2;

/// What a readout measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObservableKind {
    SigmaZ { site: usize },
    /// `Σ_n sin²(√n π/2) |n⟩⟨n|`, the population signal after a red-sideband pulse.
    Motional { site: usize },
    Number { site: usize },
    Custom,
}

#[derive(Clone, Debug)]
pub struct Observable {
    pub kind: ObservableKind,
    pub operator: Operator,
}

impl Observable {
    pub fn custom(operator: Operator) -> Result<Self> {
        if !operator.is_hermitian() {
            return Err(Error::NotHermitian {
                deviation: linalg::hermiticity_defect(operator.matrix()),
            });
        }
        Ok(Self {
            kind: ObservableKind::Custom,
            operator,
        })
    }
}

/// Eigenvalue of the motional readout on Fock level `n`.
pub fn motional_weight(n: usize) -> f64 {
    // sin(√n π/2) vanishes exactly for even perfect squares; avoid rounding residue there
    let r = (n as f64).sqrt();
    if r.fract() == 0.0 && (r as usize) % 2 == 0 {
        return 0.0;
    }
    (r * FRAC_PI_2).sin().powi(2)
}

pub fn motional_observable(site: usize, layout: &SpaceLayout) -> Result<Observable> {
    layout.check_site(site)?;
    let d = layout.site_dims()[site];
    let m = Array2::from_shape_fn((d, d), |(i, j)| {
        if i == j {
            C64::new(motional_weight(i), 0.0)
        } else {
            ZERO
        }
    });
    Ok(Observable {
        kind: ObservableKind::Motional { site },
        operator: embed_local(&m, site, layout)?,
    })
}

pub fn number_observable(site: usize, layout: &SpaceLayout) -> Result<Observable> {
    layout.check_site(site)?;
    let d = layout.site_dims()[site];
    Ok(Observable {
        kind: ObservableKind::Number { site },
        operator: embed_local(&local::number(d), site, layout)?,
    })
}

pub fn sigma_z_observable(site: usize, layout: &SpaceLayout) -> Result<Observable> {
    layout.check_site(site)?;
    if layout.site_dims()[site] != 2 {
        return Err(Error::InvalidParameter(format!(
            "site {site} is not a two-level system"
        )));
    }
    Ok(Observable {
        kind: ObservableKind::SigmaZ { site },
        operator: embed_local(&local::sigma_z(), site, layout)?,
    })
}
