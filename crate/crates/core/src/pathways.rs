//! Liouville-space pathway expansion of pulse sequences, direct pathway
//! evaluation, and phase-cycled extraction of phase-signature components.
//!
//! Each pulse `𝒱ρ = VρV†` splits into terms `c · X ρ Y` where the ket factor
//! `X ∈ {𝕀, A†, A}` and the bra factor `Y ∈ {𝕀, A, A†}`. Terms carry letters
//! `L` (`A†ρ`), `l` (`Aρ`), `R` (`ρA`) and `r` (`ρA†`) and a phase weight
//! `m ∈ {−2, …, 2}` multiplying the pulse phase. A pathway picks one term per
//! pulse. Phase cycling recovers the same sums from full-signal evaluations on
//! a grid of pulse phases.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, adjoint, C64, ONE, ZERO};
use crate::liouville::{DensityMatrix, Operator, Propagator, SpaceLayout};
use crate::pulses::{Interaction, Observable};
use crate::spectra::Axis;

/// Relative tolerance used to decide whether operators commute or vanish.
const SYMMETRY_TOL: f64 = 1e-10;

/// One side of an interaction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    Identity,
    /// `A†` on the ket side, `A†` multiplied from the right on the bra side.
    Raise,
    /// `A` on the ket side, `A` multiplied from the right on the bra side.
    Lower,
}

/// A single product term of `𝒱ρ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionTerm {
    pub ket: Factor,
    pub bra: Factor,
    pub amplitude: f64,
    /// Net coefficient of the pulse phase.
    pub weight: i32,
}

impl InteractionTerm {
    /// Change of the ket and bra excitation numbers.
    pub fn shifts(&self) -> (i32, i32) {
        let ket = match self.ket {
            Factor::Identity => 0,
            Factor::Raise => 1,
            Factor::Lower => -1,
        };
        // ⟨b|A = (A†|b⟩)†: a right factor A raises the bra
        let bra = match self.bra {
            Factor::Identity => 0,
            Factor::Raise => -1,
            Factor::Lower => 1,
        };
        (ket, bra)
    }

    /// Diagram letters: `L`, `l`, `R`, `r`, `0` for identity, `(Lr)` for two arrows.
    pub fn label(&self) -> String {
        let ket = match self.ket {
            Factor::Identity => "",
            Factor::Raise => "L",
            Factor::Lower => "l",
        };
        let bra = match self.bra {
            Factor::Identity => "",
            Factor::Raise => "r",
            Factor::Lower => "R",
        };
        match (ket.is_empty(), bra.is_empty()) {
            (true, true) => "0".into(),
            (false, true) => ket.into(),
            (true, false) => bra.into(),
            (false, false) => format!("({ket}{bra})"),
        }
    }
}

/// The product terms of `VρV†` with nonzero amplitude; only the identity and
/// single-arrow terms for linearized pulses.
pub fn expand_interaction(v: &Interaction) -> Vec<InteractionTerm> {
    let ket = [
        (Factor::Identity, v.alpha, 0),
        (Factor::Raise, v.beta, 1),
        (Factor::Lower, v.gamma, -1),
    ];
    // V† = α + β e^{−iφ} A + γ e^{iφ} A†
    let bra = [
        (Factor::Identity, v.alpha, 0),
        (Factor::Lower, v.beta, -1),
        (Factor::Raise, v.gamma, 1),
    ];
    let mut out = Vec::with_capacity(9);
    for &(kf, ka, km) in &ket {
        for &(bf, ba, bm) in &bra {
            if v.linearized && kf != Factor::Identity && bf != Factor::Identity {
                continue;
            }
            let amplitude = ka * ba;
            if amplitude != 0.0 {
                out.push(InteractionTerm {
                    ket: kf,
                    bra: bf,
                    amplitude,
                    weight: km + bm,
                });
            }
        }
    }
    out
}

/// Integer coefficients of the phase variables, in order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhaseSignature(Vec<i32>);

impl PhaseSignature {
    pub fn new(coefficients: Vec<i32>) -> Result<Self> {
        if coefficients.iter().sum::<i32>() != 0 {
            return Err(Error::InvalidParameter(format!(
                "signature {coefficients:?} must sum to zero"
            )));
        }
        Ok(Self(coefficients))
    }

    /// Any integer vector, including ones with nonzero sum; used for
    /// components of systems without excitation-number symmetry.
    pub fn unchecked(coefficients: Vec<i32>) -> Self {
        Self(coefficients)
    }

    pub fn coefficients(&self) -> &[i32] {
        &self.0
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|n| -n).collect())
    }
}

impl fmt::Display for PhaseSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|n| format!("{n:+}")).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Phase variable names in order of first appearance.
pub fn phase_variables(pulses: &[Interaction]) -> Vec<String> {
    let mut vars: Vec<String> = Vec::new();
    for p in pulses {
        if !vars.contains(&p.phase_var) {
            vars.push(p.phase_var.clone());
        }
    }
    vars
}

/// One diagram: a term choice for every pulse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    pub terms: Vec<InteractionTerm>,
    pub amplitude: f64,
    pub label: String,
}

impl Pathway {
    fn from_terms(terms: Vec<InteractionTerm>) -> Self {
        let amplitude = terms.iter().map(|t| t.amplitude).product();
        let label = terms.iter().map(|t| t.label()).collect();
        Self {
            terms,
            amplitude,
            label,
        }
    }
}

/// Delay after a pulse: held fixed or scanned on a uniform axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Delay {
    Fixed(f64),
    Scan(Axis),
}

impl Delay {
    fn validate(&self) -> Result<()> {
        match self {
            Delay::Fixed(t) if *t < 0.0 || t.is_nan() => Err(Error::NegativeTime(*t)),
            Delay::Scan(a) => a.validate(),
            _ => Ok(()),
        }
    }
}

/// Linear map `X ↦ Σ c · L X R` with optional (identity) factors.
#[derive(Clone, Debug)]
pub struct Sandwich {
    terms: Vec<(C64, Option<Arc<Array2<C64>>>, Option<Arc<Array2<C64>>>)>,
}

impl Sandwich {
    fn apply(&self, x: &Array2<C64>) -> Array2<C64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (c, l, r) in &self.terms {
            let y = match (l, r) {
                (None, None) => x.clone(),
                (Some(l), None) => l.dot(x),
                (None, Some(r)) => x.dot(r.as_ref()),
                (Some(l), Some(r)) => l.dot(x).dot(r.as_ref()),
            };
            out.scaled_add(*c, &y);
        }
        out
    }

    /// Adjoint with respect to `(M, X) ↦ Tr(M X)`: `M ↦ Σ c · R M L`.
    fn dual(&self, m: &Array2<C64>) -> Array2<C64> {
        let mut out = Array2::zeros(m.raw_dim());
        for (c, l, r) in &self.terms {
            let y = match (l, r) {
                (None, None) => m.clone(),
                (Some(l), None) => m.dot(l.as_ref()),
                (None, Some(r)) => r.dot(m),
                (Some(l), Some(r)) => r.dot(m).dot(l.as_ref()),
            };
            out.scaled_add(*c, &y);
        }
        out
    }
}

/// How the phase grid of a cycled evaluation is laid out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseGrid {
    /// Points per phase variable; defaults to `2·m_max + 1`.
    pub lengths: Option<Vec<usize>>,
    pub reference: ReferenceMode,
}

/// Whether one phase variable is pinned to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// Pin the last variable when the setup conserves the excitation number.
    #[default]
    Auto,
    Always,
    Never,
}

/// Model, initial state, readout and pulses: everything but the delays.
pub struct Experiment {
    layout: SpaceLayout,
    propagator: Arc<Propagator>,
    initial: Array2<C64>,
    observable: Array2<C64>,
    pulses: Vec<Interaction>,
    lowering: Vec<Arc<Array2<C64>>>,
    raising: Vec<Arc<Array2<C64>>>,
    vars: Vec<String>,
    var_of_pulse: Vec<usize>,
    excitation: Option<Array2<C64>>,
    conserving: bool,
}

impl fmt::Debug for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Experiment")
            .field("layout", &self.layout)
            .field("pulses", &self.pulses)
            .field("conserving", &self.conserving)
            .finish()
    }
}

fn rel_norm(a: &Array2<C64>, scale: &Array2<C64>) -> f64 {
    linalg::frobenius_norm(a.view()) / linalg::frobenius_norm(scale.view()).max(1e-300)
}

fn commutes(a: &Array2<C64>, b: &Array2<C64>) -> bool {
    let c = a.dot(b) - b.dot(a);
    let scale = linalg::frobenius_norm(a.view()) * linalg::frobenius_norm(b.view());
    linalg::frobenius_norm(c.view()) <= SYMMETRY_TOL * scale.max(1e-300)
}

/// `[N, L] = s L` for some integer shift `s`.
fn shifts_number(n: &Array2<C64>, l: &Array2<C64>) -> Option<i32> {
    let c = n.dot(l) - l.dot(n);
    (-2..=2).find(|&s| rel_norm(&(&c - &l.mapv(|z| z * s as f64)), l) <= SYMMETRY_TOL)
}

impl Experiment {
    /// `excitation` is the total excitation number operator used for sector
    /// pruning and for the reference-phase shortcut; pass `None` to disable both.
    pub fn new(
        propagator: Arc<Propagator>,
        initial: &DensityMatrix,
        observable: &Observable,
        pulses: Vec<Interaction>,
        excitation: Option<&Operator>,
        hamiltonian: Option<&Operator>,
        jumps: &[Operator],
    ) -> Result<Self> {
        let layout = propagator.layout().clone();
        if initial.layout() != &layout || observable.operator.layout() != &layout {
            return Err(Error::LayoutMismatch);
        }
        if pulses.is_empty() {
            return Err(Error::InvalidParameter("pulse sequence is empty".into()));
        }
        let mut lowering = Vec::new();
        let mut raising = Vec::new();
        for p in &pulses {
            let a = p.lowering(&layout)?.into_matrix();
            raising.push(Arc::new(adjoint(&a)));
            lowering.push(Arc::new(a));
        }
        let vars = phase_variables(&pulses);
        let var_of_pulse = pulses
            .iter()
            .map(|p| vars.iter().position(|v| v == &p.phase_var).expect("collected above"))
            .collect();

        let excitation = excitation.map(|n| n.matrix().clone());
        let conserving = match (&excitation, hamiltonian) {
            (Some(n), Some(h)) => {
                commutes(n, h.matrix())
                    && commutes(n, initial.matrix())
                    && commutes(n, observable.operator.matrix())
                    && lowering.iter().all(|a| shifts_number(n, a) == Some(-1))
                    && jumps.iter().all(|l| shifts_number(n, l.matrix()).is_some())
            }
            _ => false,
        };
        Ok(Self {
            layout,
            propagator,
            initial: initial.matrix().clone(),
            observable: observable.operator.matrix().clone(),
            pulses,
            lowering,
            raising,
            vars,
            var_of_pulse,
            excitation,
            conserving,
        })
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn pulses(&self) -> &[Interaction] {
        &self.pulses
    }

    pub fn phase_variables(&self) -> &[String] {
        &self.vars
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    /// Hamiltonian, dissipators, initial state, readout and pulses all respect
    /// the excitation-number symmetry, so only phase differences matter.
    pub fn conserves_excitations(&self) -> bool {
        self.conserving
    }

    /// Largest reachable `|Σ m|` for each phase variable.
    pub fn max_weights(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.vars.len()];
        for (p, pulse) in self.pulses.iter().enumerate() {
            let m = expand_interaction(pulse)
                .iter()
                .map(|t| t.weight.unsigned_abs() as usize)
                .max()
                .unwrap_or(0);
            out[self.var_of_pulse[p]] += m;
        }
        out
    }

    fn term_sandwich(&self, pulse: usize, term: &InteractionTerm, coeff: C64) -> Sandwich {
        let side = |f: Factor, raise: bool| match (f, raise) {
            (Factor::Identity, _) => None,
            (Factor::Raise, _) => Some(Arc::clone(&self.raising[pulse])),
            (Factor::Lower, _) => Some(Arc::clone(&self.lowering[pulse])),
        };
        Sandwich {
            terms: vec![(coeff, side(term.ket, true), side(term.bra, false))],
        }
    }

    fn pulse_sandwich(&self, pulse: usize, phi: f64) -> Result<Sandwich> {
        let p = &self.pulses[pulse];
        let v = Arc::new(p.operator(&self.layout, phi)?.into_matrix());
        if !p.linearized {
            let vd = Arc::new(adjoint(&v));
            return Ok(Sandwich {
                terms: vec![(ONE, Some(v), Some(vd))],
            });
        }
        let k = &*v - &linalg::identity(self.layout.dim()).mapv(|z| z * p.alpha);
        let kd = adjoint(&k);
        let a = C64::new(p.alpha, 0.0);
        Ok(Sandwich {
            terms: vec![
                (a * a, None, None),
                (a, Some(Arc::new(k)), None),
                (a, None, Some(Arc::new(kd))),
            ],
        })
    }

    /// Pathways whose net phase weight per variable equals `signature`.
    ///
    /// With `prune`, drops pathways that provably vanish: the first term
    /// annihilates the initial state, or (for excitation-conserving setups)
    /// the tracked ket/bra excitation sectors become empty or end where the
    /// readout has no support.
    pub fn enumerate(&self, signature: &PhaseSignature, prune: bool) -> Result<Vec<Pathway>> {
        if signature.coefficients().len() != self.vars.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vars.len(),
                found: signature.coefficients().len(),
            });
        }
        let per_pulse: Vec<Vec<InteractionTerm>> = self.pulses.iter().map(expand_interaction).collect();
        let sectors = if prune { self.sector_tracker() } else { None };

        let mut out = Vec::new();
        let mut choice = vec![0usize; per_pulse.len()];
        loop {
            let terms: Vec<InteractionTerm> =
                choice.iter().zip(&per_pulse).map(|(&c, ts)| ts[c]).collect();
            let mut net = vec![0i32; self.vars.len()];
            for (p, t) in terms.iter().enumerate() {
                net[self.var_of_pulse[p]] += t.weight;
            }
            if net == signature.coefficients()
                && !(prune && self.provably_zero(&terms, sectors.as_ref()))
            {
                out.push(Pathway::from_terms(terms));
            }
            // odometer over term choices, last pulse fastest
            let mut k = per_pulse.len();
            loop {
                if k == 0 {
                    if out.is_empty() {
                        log::warn!("no pathway reaches signature {signature}");
                    }
                    return Ok(out);
                }
                k -= 1;
                choice[k] += 1;
                if choice[k] < per_pulse[k].len() {
                    break;
                }
                choice[k] = 0;
            }
        }
    }

    fn sector_tracker(&self) -> Option<SectorTracker> {
        if !self.conserving || !self.propagator.is_closed() {
            return None;
        }
        let n = self.excitation.as_ref()?;
        let levels: Vec<i64> = (0..self.layout.dim()).map(|i| n[[i, i]].re.round() as i64).collect();
        let max_level = *levels.iter().max()?;
        let proj = |k: i64| -> Vec<usize> { (0..levels.len()).filter(|&i| levels[i] == k).collect() };
        let block_norm = |m: &Array2<C64>, rows: &[usize], cols: &[usize]| -> f64 {
            rows.iter()
                .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
                .map(|(i, j)| m[[i, j]].norm())
                .fold(0.0, f64::max)
        };
        let mut initial = BTreeSet::new();
        let mut readout = BTreeSet::new();
        for k in 0..=max_level {
            for b in 0..=max_level {
                let (pk, pb) = (proj(k), proj(b));
                if block_norm(&self.initial, &pk, &pb) > 0.0 {
                    initial.insert((k, b));
                }
                // Tr(O X) with X in sector (k, b) sees the block O_{b,k}
                if block_norm(&self.observable, &pb, &pk) > 0.0 {
                    readout.insert((k, b));
                }
            }
        }
        Some(SectorTracker {
            initial,
            readout,
            max_level,
        })
    }

    fn provably_zero(&self, terms: &[InteractionTerm], sectors: Option<&SectorTracker>) -> bool {
        let first = self.term_sandwich(0, &terms[0], ONE).apply(&self.initial);
        if first.iter().all(|z| *z == ZERO) {
            return true;
        }
        let Some(tr) = sectors else { return false };
        let mut current = tr.initial.clone();
        for t in terms {
            let (dk, db) = t.shifts();
            current = current
                .into_iter()
                .map(|(k, b)| (k + dk as i64, b + db as i64))
                .filter(|&(k, b)| k >= 0 && b >= 0 && k <= tr.max_level && b <= tr.max_level)
                .collect();
            if current.is_empty() {
                return true;
            }
        }
        current.is_disjoint(&tr.readout)
    }

    /// `Σ_pathways amplitude · Tr{O 𝒢(t_n) 𝒜_n ⋯ 𝒢(t_1) 𝒜_1 ρ0}` on the delay grid.
    pub fn evaluate_pathways(&self, pathways: &[Pathway], delays: &[Delay]) -> Result<ArrayD<C64>> {
        self.check_delays(delays)?;
        for pw in pathways {
            if pw.terms.len() != self.pulses.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.pulses.len(),
                    found: pw.terms.len(),
                });
            }
        }
        let grids = pathways
            .par_iter()
            .map(|pw| {
                let maps: Vec<Sandwich> = pw
                    .terms
                    .iter()
                    .enumerate()
                    .map(|(p, t)| self.term_sandwich(p, t, ONE))
                    .collect();
                let grid = self.scan(&maps, delays)?;
                Ok(grid.mapv(|z| z * pw.amplitude))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = ArrayD::zeros(IxDyn(&scan_shape(delays)));
        for g in grids {
            total = total + g;
        }
        Ok(total)
    }

    /// Full signal `Tr{O ∏ 𝒢𝒱(φ) ρ0}` at the given phase per variable.
    pub fn full_signal(&self, phases: &[f64], delays: &[Delay]) -> Result<ArrayD<C64>> {
        self.check_delays(delays)?;
        if phases.len() != self.vars.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vars.len(),
                found: phases.len(),
            });
        }
        let maps = (0..self.pulses.len())
            .map(|p| self.pulse_sandwich(p, phases[self.var_of_pulse[p]]))
            .collect::<Result<Vec<_>>>()?;
        self.scan(&maps, delays)
    }

    /// Resolve grid lengths and reference use for a phase grid request.
    pub fn resolve_phase_grid(&self, grid: &PhaseGrid) -> Result<(Vec<usize>, bool)> {
        let reference = match grid.reference {
            ReferenceMode::Auto => self.conserving && self.vars.len() > 1,
            ReferenceMode::Always => {
                if !self.conserving {
                    log::warn!("reference phase pinned although the setup does not conserve excitations");
                }
                self.vars.len() > 1
            }
            ReferenceMode::Never => false,
        };
        let needed: Vec<usize> = self.max_weights().iter().map(|m| 2 * m + 1).collect();
        let lengths = match &grid.lengths {
            None => needed,
            Some(ls) => {
                if ls.len() != self.vars.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.vars.len(),
                        found: ls.len(),
                    });
                }
                for (v, (&l, &n)) in ls.iter().zip(&needed).enumerate() {
                    let pinned = reference && v + 1 == self.vars.len();
                    if l < n && !pinned {
                        return Err(Error::PhaseGridTooShort {
                            var: self.vars[v].clone(),
                            needed: n,
                            got: l,
                        });
                    }
                }
                ls.clone()
            }
        };
        Ok((lengths, reference))
    }

    /// Full-signal grids at every cycled phase point, with the phase points.
    fn cycle(&self, grid: &PhaseGrid, delays: &[Delay]) -> Result<(Vec<usize>, bool, Vec<(Vec<usize>, ArrayD<C64>)>)> {
        self.check_delays(delays)?;
        let (lengths, reference) = self.resolve_phase_grid(grid)?;
        let n_vars = self.vars.len();
        let cycled = if reference { n_vars - 1 } else { n_vars };
        let mut points: Vec<Vec<usize>> = vec![Vec::new()];
        for &l in &lengths[..cycled] {
            points = points
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                })
                .collect();
        }
        let results = points
            .into_par_iter()
            .map(|idx| {
                let mut phases: Vec<f64> = idx
                    .iter()
                    .zip(&lengths)
                    .map(|(&k, &l)| 2.0 * PI * k as f64 / l as f64)
                    .collect();
                phases.resize(n_vars, 0.0);
                let s = self.full_signal(&phases, delays)?;
                Ok((idx, s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((lengths, reference, results))
    }

    fn extract(
        lengths: &[usize],
        samples: &[(Vec<usize>, ArrayD<C64>)],
        target: &[i32],
        shape: &[usize],
    ) -> ArrayD<C64> {
        let total: usize = samples.first().map_or(1, |(idx, _)| {
            idx.iter().zip(lengths).map(|(_, &l)| l).product()
        });
        let mut acc = ArrayD::zeros(IxDyn(shape));
        for (idx, s) in samples {
            let arg: f64 = idx
                .iter()
                .zip(lengths)
                .zip(target)
                .map(|((&k, &l), &n)| -2.0 * PI * (n as i64 * k as i64).rem_euclid(l as i64) as f64 / l as f64)
                .sum();
            acc.scaled_add(C64::from_polar(1.0, arg), s);
        }
        acc.mapv(|z| z / total as f64)
    }

    /// Component of the full signal at `signature`, by inverse DFT over the
    /// phase grid.
    pub fn phase_cycled(&self, signature: &PhaseSignature, grid: &PhaseGrid, delays: &[Delay]) -> Result<ArrayD<C64>> {
        if signature.coefficients().len() != self.vars.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vars.len(),
                found: signature.coefficients().len(),
            });
        }
        let (lengths, _, samples) = self.cycle(grid, delays)?;
        Ok(Self::extract(&lengths, &samples, signature.coefficients(), &scan_shape(delays)))
    }

    /// Every component resolvable on the phase grid, keyed by signature.
    ///
    /// With a pinned reference the last coefficient is implied by the others
    /// summing to zero.
    pub fn all_components(&self, grid: &PhaseGrid, delays: &[Delay]) -> Result<BTreeMap<PhaseSignature, ArrayD<C64>>> {
        let (lengths, reference, samples) = self.cycle(grid, delays)?;
        let shape = scan_shape(delays);
        let cycled = if reference { self.vars.len() - 1 } else { self.vars.len() };
        let mut targets: Vec<Vec<i32>> = vec![Vec::new()];
        for &l in &lengths[..cycled] {
            let l = l as i32;
            let lo = -(l - 1) / 2;
            targets = targets
                .into_iter()
                .flat_map(|t| {
                    (lo..lo + l).map(move |n| {
                        let mut u = t.clone();
                        u.push(n);
                        u
                    })
                })
                .collect();
        }
        Ok(targets
            .into_iter()
            .map(|t| {
                let values = Self::extract(&lengths, &samples, &t, &shape);
                let mut full = t.clone();
                if reference {
                    full.push(-t.iter().sum::<i32>());
                }
                (PhaseSignature::unchecked(full), values)
            })
            .collect())
    }

    /// Eigenmode weights of the signal along the delay `axis`, with every
    /// delay held at the value given in `delays` (which must all be fixed).
    ///
    /// Returns `(λ, w)` with `S(t_axis) = Σ w e^{λ t_axis}` for the pathways given.
    pub fn modal_weights(&self, pathways: &[Pathway], delays: &[f64], axis: usize) -> Result<Vec<(C64, C64)>> {
        let n = self.pulses.len();
        if delays.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: delays.len(),
            });
        }
        if axis >= n {
            return Err(Error::UnknownAxis(format!("t{}", axis + 1)));
        }
        let mut total: Vec<(C64, C64)> = Vec::new();
        for pw in pathways {
            let maps: Vec<Sandwich> = pw
                .terms
                .iter()
                .enumerate()
                .map(|(p, t)| self.term_sandwich(p, t, ONE))
                .collect();
            let mut x = self.initial.clone();
            for k in 0..=axis {
                x = maps[k].apply(&x);
                if k < axis {
                    x = self.propagator.evolve(&x, delays[k])?;
                }
            }
            let mut c = self.observable.clone();
            for k in (axis + 1..n).rev() {
                c = self.propagator.evolve_dual(&c, delays[k])?;
                c = maps[k].dual(&c);
            }
            let modes = self.propagator.modes(&c, &x)?;
            if total.is_empty() {
                total = modes.into_iter().map(|(l, w)| (l, w * pw.amplitude)).collect();
            } else {
                for (acc, (_, w)) in total.iter_mut().zip(modes) {
                    acc.1 += w * pw.amplitude;
                }
            }
        }
        Ok(total)
    }

    fn check_delays(&self, delays: &[Delay]) -> Result<()> {
        if delays.len() != self.pulses.len() {
            return Err(Error::DimensionMismatch {
                expected: self.pulses.len(),
                found: delays.len(),
            });
        }
        delays.iter().try_for_each(Delay::validate)
    }

    /// Evaluate `Tr{O 𝒢(t_n) 𝒫_n ⋯ 𝒢(t_1) 𝒫_1 ρ0}` over the scanned delays.
    ///
    /// States are propagated forward up to the last scanned delay and the
    /// readout backward to it; the two meet in one matrix product.
    fn scan(&self, maps: &[Sandwich], delays: &[Delay]) -> Result<ArrayD<C64>> {
        let n = maps.len();
        let d = self.layout.dim();
        let last = delays
            .iter()
            .rposition(|dl| matches!(dl, Delay::Scan(_)))
            .unwrap_or(n - 1);

        let mut states = vec![self.initial.clone()];
        for k in 0..=last {
            states = states.par_iter().map(|x| maps[k].apply(x)).collect();
            if k == last {
                break;
            }
            states = match &delays[k] {
                Delay::Fixed(t) => states
                    .par_iter()
                    .map(|x| self.propagator.evolve(x, *t))
                    .collect::<Result<Vec<_>>>()?,
                Delay::Scan(ax) => states
                    .par_iter()
                    .map(|x| self.trajectory(x, ax, false))
                    .collect::<Result<Vec<_>>>()?
                    .concat(),
            };
        }

        let mut c = self.observable.clone();
        for k in (last + 1..n).rev() {
            let Delay::Fixed(t) = delays[k] else {
                unreachable!("delays after the last scanned one are fixed")
            };
            c = self.propagator.evolve_dual(&c, t)?;
            c = maps[k].dual(&c);
        }
        let covectors = match &delays[last] {
            Delay::Fixed(t) => vec![self.propagator.evolve_dual(&c, *t)?],
            Delay::Scan(ax) => self.trajectory(&c, ax, true)?,
        };

        let left = Array2::from_shape_fn((covectors.len(), d * d), |(j, idx)| {
            covectors[j][[idx % d, idx / d]]
        });
        let right = Array2::from_shape_fn((d * d, states.len()), |(idx, p)| {
            states[p][[idx / d, idx % d]]
        });
        let product = linalg::matmul(&left, &right);
        let shape = scan_shape(delays);
        let flat: Vec<C64> = (0..states.len())
            .flat_map(|p| (0..covectors.len()).map(move |j| (p, j)))
            .map(|(p, j)| product[[j, p]])
            .collect();
        ArrayD::from_shape_vec(IxDyn(&shape), flat)
            .map_err(|e| Error::Linalg(format!("signal grid shape: {e}")))
    }

    fn trajectory(&self, x: &Array2<C64>, ax: &Axis, dual: bool) -> Result<Vec<Array2<C64>>> {
        let step = |m: &Array2<C64>, t: f64| {
            if dual {
                self.propagator.evolve_dual(m, t)
            } else {
                self.propagator.evolve(m, t)
            }
        };
        let mut out = Vec::with_capacity(ax.count);
        let mut current = step(x, ax.start)?;
        for _ in 1..ax.count {
            let next = step(&current, ax.step)?;
            out.push(std::mem::replace(&mut current, next));
        }
        out.push(current);
        Ok(out)
    }
}

struct SectorTracker {
    initial: BTreeSet<(i64, i64)>,
    readout: BTreeSet<(i64, i64)>,
    max_level: i64,
}

/// Shape of the grid spanned by the scanned delays.
pub fn scan_shape(delays: &[Delay]) -> Vec<usize> {
    delays
        .iter()
        .filter_map(|d| match d {
            Delay::Scan(a) => Some(a.count),
            Delay::Fixed(_) => None,
        })
        .collect()
}

/// Pathways of `experiment` that match `signature`, pruned.
pub fn enumerate_pathways(experiment: &Experiment, signature: &PhaseSignature) -> Result<Vec<Pathway>> {
    experiment.enumerate(signature, true)
}

/// Direct pathway sum at a single set of delays.
pub fn evaluate_pathways(experiment: &Experiment, pathways: &[Pathway], delays: &[f64]) -> Result<C64> {
    let d: Vec<Delay> = delays.iter().map(|&t| Delay::Fixed(t)).collect();
    let grid = experiment.evaluate_pathways(pathways, &d)?;
    Ok(grid.iter().copied().next().unwrap_or(ZERO))
}

/// Phase-cycled signature component at a single set of delays.
pub fn phase_cycled_signal(
    experiment: &Experiment,
    signature: &PhaseSignature,
    delays: &[f64],
    grid: &PhaseGrid,
) -> Result<C64> {
    let d: Vec<Delay> = delays.iter().map(|&t| Delay::Fixed(t)).collect();
    let values = experiment.phase_cycled(signature, grid, &d)?;
    Ok(values.iter().copied().next().unwrap_or(ZERO))
}
