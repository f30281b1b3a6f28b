//! Protocol files: a JSON description of model, pulses, delays, signature,
//! readout and transform, plus the named built-in experiments.
//!
//! Sites are numbered from 1 in protocol files and from 0 everywhere else.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::sync::Arc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::liouville::{DensityMatrix, Operator, Propagator, SpaceLayout};
use crate::models::{Bath, IsingChainParams, Model, PhononChainParams};
use crate::pathways::{phase_variables, Delay, Experiment, PhaseGrid, PhaseSignature};
use crate::pulses::{self, Interaction, ModeKind, Observable};
use crate::spectra::{self, Axis, Scaling, SignalGrid, SpectrumGrid};

/// Apodization used for closed models when a transform gives none.
pub const CLOSED_APODIZATION: f64 = 0.01;

/// One problem found while reading a protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    /// Dotted field path such as `pulses[1].site`; empty for the document root.
    pub path: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}

impl Diagnostic {
    fn new(code: &str, path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            path: path.into(),
            message: message.into(),
            line: None,
            column: None,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.code)?;
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, " line {l}, column {c}")?;
        }
        if !self.path.is_empty() {
            write!(f, " at `{}`", self.path)?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Diagnostic codes, one per rule.
pub mod codes {
    pub const SYNTAX: &str = "syntax";
    pub const SCHEMA: &str = "schema";
    pub const UNITS: &str = "units-mismatch";
    pub const MODEL: &str = "model-parameter";
    pub const SITE_RANGE: &str = "site-out-of-range";
    pub const NO_PULSES: &str = "no-pulses";
    pub const PULSE_MODEL: &str = "pulse-model-mismatch";
    pub const PULSE: &str = "pulse-parameter";
    pub const DELAY_COUNT: &str = "delay-count";
    pub const DELAY_NAME: &str = "delay-name";
    pub const DELAY_FORM: &str = "delay-form";
    pub const DELAY_RANGE: &str = "delay-range";
    pub const SIGNATURE_LENGTH: &str = "signature-length";
    pub const SIGNATURE_SUM: &str = "signature-sum";
    pub const OBSERVABLE_MODEL: &str = "observable-model-mismatch";
    pub const STEADY_STATE_BATH: &str = "steady-state-needs-bath";
    pub const INITIAL: &str = "initial-state";
    pub const PHASE_GRID: &str = "phase-grid";
    pub const TRANSFORM: &str = "transform";
    pub const OVERRIDE: &str = "override";
}

fn default_local_dim() -> usize {
    4
}

fn default_cap() -> Option<usize> {
    Some(4)
}

fn default_j0() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_selective() -> f64 {
    pulses::SELECTIVE_AMPLITUDE
}

fn default_zero_pad() -> usize {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_one(n: &usize) -> bool {
    *n == 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathSpec {
    pub site: usize,
    pub nbar: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhononSpec {
    pub n_ions: usize,
    pub beta0: f64,
    #[serde(rename = "U", default)]
    pub u: f64,
    #[serde(default = "default_local_dim")]
    pub local_dim: usize,
    /// `null` keeps the full tensor-product space.
    #[serde(default = "default_cap")]
    pub excitation_cap: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baths: Vec<BathSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsingSpec {
    pub n_spins: usize,
    #[serde(rename = "J0", default = "default_j0")]
    pub j0: f64,
    pub exponent: f64,
    #[serde(rename = "B")]
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Phonon(PhononSpec),
    Ising(IsingSpec),
}

impl ModelSpec {
    pub fn n_sites(&self) -> usize {
        match self {
            ModelSpec::Phonon(p) => p.n_ions,
            ModelSpec::Ising(p) => p.n_spins,
        }
    }

    pub fn units(&self) -> &'static str {
        match self {
            ModelSpec::Phonon(_) => "nu_x",
            ModelSpec::Ising(_) => "J0",
        }
    }

    fn has_bath(&self) -> bool {
        matches!(self, ModelSpec::Phonon(p) if p.baths.iter().any(|b| b.gamma > 0.0))
    }

    /// Engine-side model with 0-based sites.
    pub fn to_model(&self) -> Model {
        match self {
            ModelSpec::Phonon(p) => Model::Phonon(PhononChainParams {
                n_ions: p.n_ions,
                beta0: p.beta0,
                anharmonicity: p.u,
                local_dim: p.local_dim,
                excitation_cap: p.excitation_cap,
                baths: p
                    .baths
                    .iter()
                    .map(|b| Bath {
                        site: b.site.saturating_sub(1),
                        nbar: b.nbar,
                        rate: b.gamma,
                    })
                    .collect(),
            }),
            ModelSpec::Ising(p) => Model::Ising(IsingChainParams {
                n_spins: p.n_spins,
                j0: p.j0,
                exponent: p.exponent,
                field: p.b,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialSpec {
    /// Lowest eigenstate of the Hamiltonian.
    Ground,
    /// Unique stationary state of the open dynamics.
    SteadyState,
    /// Product basis state, one occupation (or spin-up flag) per site.
    Occupations(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PulseSpec {
    /// Carrier π/2 pulse on a spin.
    SpinPi2 { site: usize, phase: String },
    /// Weak motional displacement, to first order in `epsilon`.
    Displacement {
        site: usize,
        phase: String,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// `V+`: identity plus a pure raising term.
    Raise {
        site: usize,
        phase: String,
        #[serde(default = "default_selective")]
        amplitude: f64,
    },
    /// `V−`: identity plus a pure lowering term.
    Lower {
        site: usize,
        phase: String,
        #[serde(default = "default_selective")]
        amplitude: f64,
    },
    /// `α + β e^{iφ} A† + γ e^{−iφ} A` with `A = Σ w_i A_i`.
    Generic {
        sites: Vec<(usize, f64)>,
        phase: String,
        alpha: f64,
        beta: f64,
        gamma: f64,
        #[serde(default, skip_serializing_if = "is_false")]
        linearized: bool,
    },
}

impl PulseSpec {
    pub fn phase(&self) -> &str {
        match self {
            PulseSpec::SpinPi2 { phase, .. }
            | PulseSpec::Displacement { phase, .. }
            | PulseSpec::Raise { phase, .. }
            | PulseSpec::Lower { phase, .. }
            | PulseSpec::Generic { phase, .. } => phase,
        }
    }

    fn sites(&self) -> Vec<usize> {
        match self {
            PulseSpec::SpinPi2 { site, .. }
            | PulseSpec::Displacement { site, .. }
            | PulseSpec::Raise { site, .. }
            | PulseSpec::Lower { site, .. } => vec![*site],
            PulseSpec::Generic { sites, .. } => sites.iter().map(|s| s.0).collect(),
        }
    }

    /// Engine-side interaction with 0-based sites.
    pub fn to_interaction(&self, spins: bool) -> Result<Interaction> {
        let mode = if spins { ModeKind::SpinLadder } else { ModeKind::PhononLadder };
        let site0 = |s: &usize| s.checked_sub(1).ok_or(Error::SiteOutOfRange { site: 0, n_sites: 0 });
        match self {
            PulseSpec::SpinPi2 { site, phase } => pulses::spin_pi2(site0(site)?, phase),
            PulseSpec::Displacement { site, phase, epsilon } => {
                pulses::weak_displacement(site0(site)?, *epsilon, phase)
            }
            PulseSpec::Raise { site, phase, amplitude } => pulses::raise_only(site0(site)?, *amplitude, phase),
            PulseSpec::Lower { site, phase, amplitude } => pulses::lower_only(site0(site)?, *amplitude, phase),
            PulseSpec::Generic {
                sites,
                phase,
                alpha,
                beta,
                gamma,
                linearized,
            } => {
                let sites = sites
                    .iter()
                    .map(|(s, w)| Ok((site0(s)?, *w)))
                    .collect::<Result<Vec<_>>>()?;
                Interaction::new(sites, mode, *alpha, *beta, *gamma, phase.clone(), *linearized)
            }
        }
    }
}

/// A delay: either `value`, or `start` + `points` with exactly one of `stop`, `step`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
}

impl DelaySpec {
    pub fn fixed(value: f64) -> Self {
        Self {
            value: Some(value),
            ..Self::default()
        }
    }

    pub fn scan_step(start: f64, step: f64, points: usize) -> Self {
        Self {
            start: Some(start),
            step: Some(step),
            points: Some(points),
            ..Self::default()
        }
    }

    pub fn is_scan(&self) -> bool {
        self.value.is_none()
    }

    fn check(&self, path: &str, out: &mut Vec<Diagnostic>) {
        let d = |m: &str| Diagnostic::new(codes::DELAY_FORM, path, m);
        match self.value {
            Some(v) => {
                if self.start.is_some() || self.stop.is_some() || self.step.is_some() || self.points.is_some() {
                    out.push(d("a fixed delay takes only `value`"));
                } else if !(v >= 0.0 && v.is_finite()) {
                    out.push(Diagnostic::new(
                        codes::DELAY_RANGE,
                        path,
                        format!("delay must be a finite non-negative time, got {v}"),
                    ));
                }
            }
            None => {
                let (Some(start), Some(points)) = (self.start, self.points) else {
                    out.push(d("a scan needs `start` and `points` (or give `value`)"));
                    return;
                };
                if self.stop.is_some() == self.step.is_some() {
                    out.push(d("a scan needs exactly one of `stop` and `step`"));
                    return;
                }
                if points < 2 {
                    out.push(Diagnostic::new(codes::DELAY_RANGE, path, "a scan needs at least 2 points"));
                    return;
                }
                let step = self.resolved_step().unwrap_or(f64::NAN);
                if !(start >= 0.0 && start.is_finite() && step > 0.0 && step.is_finite()) {
                    out.push(Diagnostic::new(
                        codes::DELAY_RANGE,
                        path,
                        "a scan needs start >= 0 and increasing finite times",
                    ));
                }
            }
        }
    }

    fn resolved_step(&self) -> Option<f64> {
        match (self.step, self.stop, self.start, self.points) {
            (Some(s), _, _, _) => Some(s),
            (None, Some(stop), Some(start), Some(n)) if n >= 2 => Some((stop - start) / (n - 1) as f64),
            _ => None,
        }
    }

    /// Engine delay; `name` becomes the axis name of a scan.
    pub fn to_delay(&self, name: &str) -> Delay {
        match self.value {
            Some(v) => Delay::Fixed(v),
            None => Delay::Scan(Axis::new(
                name,
                self.start.unwrap_or(0.0),
                self.resolved_step().unwrap_or(f64::NAN),
                self.points.unwrap_or(0),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutKind {
    SigmaZ,
    /// Red-sideband population readout `Σ sin²(√n π/2)|n⟩⟨n|`.
    Motional,
    Number,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSpec {
    pub kind: ReadoutKind,
    pub site: usize,
}

impl ReadoutSpec {
    pub fn to_observable(&self, layout: &SpaceLayout) -> Result<Observable> {
        let site = self.site.checked_sub(1).ok_or(Error::SiteOutOfRange {
            site: 0,
            n_sites: layout.n_sites(),
        })?;
        match self.kind {
            ReadoutKind::SigmaZ => pulses::sigma_z_observable(site, layout),
            ReadoutKind::Motional => pulses::motional_observable(site, layout),
            ReadoutKind::Number => pulses::number_observable(site, layout),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    PhaseCycling,
    Direct,
    /// Run both engines and report their deviation.
    Both,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::PhaseCycling => "phase-cycling",
            Method::Direct => "direct",
            Method::Both => "both",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    /// Delay names to transform, e.g. `["t1", "t3"]`.
    pub axes: Vec<String>,
    /// One rate per axis, one rate for all, or empty for the default.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub apodization: Vec<f64>,
    #[serde(default = "default_zero_pad", skip_serializing_if = "is_one")]
    pub zero_pad: usize,
    /// Delay names whose frequency axis is negated after the transform.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flip: Vec<String>,
    #[serde(default)]
    pub scaling: Scaling,
}

impl TransformSpec {
    /// Apodization rates per axis; `closed` selects the closed-system default.
    pub fn rates(&self, closed: bool) -> Vec<f64> {
        match self.apodization.as_slice() {
            [] => vec![if closed { CLOSED_APODIZATION } else { 0.0 }; self.axes.len()],
            [eta] => vec![*eta; self.axes.len()],
            etas => etas.to_vec(),
        }
    }

    /// Transform, flip and scale a signal grid as directed.
    pub fn apply(&self, signal: &SignalGrid, closed: bool) -> Result<SpectrumGrid> {
        let axes: Vec<&str> = self.axes.iter().map(String::as_str).collect();
        let spec = spectra::fourier_nd(signal, &axes, &self.rates(closed), self.zero_pad)?;
        let flip: Vec<String> = self.flip.iter().map(|t| spectra::frequency_axis_name(t)).collect();
        let flip: Vec<&str> = flip.iter().map(String::as_str).collect();
        let spec = if flip.is_empty() { spec } else { spectra::flip_axes(&spec, &flip)? };
        Ok(match self.scaling {
            Scaling::Linear => spec,
            Scaling::Arcsinh => spectra::arcsinh_scale(&spec),
        })
    }
}

/// A complete, validated experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Energy unit of every number in the file: `"nu_x"` or `"J0"`.
    pub units: String,
    pub model: ModelSpec,
    pub initial: InitialSpec,
    pub pulses: Vec<PulseSpec>,
    /// `t1..tn`; delay `tk` follows pulse `k`.
    pub delays: BTreeMap<String, DelaySpec>,
    /// Coefficients over the phase variables in order of first use.
    pub signature: Vec<i32>,
    pub readout: ReadoutSpec,
    #[serde(default)]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_grid: Option<PhaseGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformSpec>,
}

fn delay_name(k: usize) -> String {
    format!("t{}", k + 1)
}

impl ProtocolSpec {
    /// Distinct phase variables in order of first use.
    pub fn phase_variables(&self) -> Vec<String> {
        let mut vars: Vec<String> = Vec::new();
        for p in &self.pulses {
            if !vars.iter().any(|v| v == p.phase()) {
                vars.push(p.phase().to_string());
            }
        }
        vars
    }

    /// Delays in pulse order.
    pub fn ordered_delays(&self) -> Vec<(String, &DelaySpec)> {
        (0..self.pulses.len())
            .filter_map(|k| {
                let name = delay_name(k);
                self.delays.get(&name).map(|d| (name, d))
            })
            .collect()
    }

    pub fn scanned_axes(&self) -> Vec<String> {
        self.ordered_delays()
            .into_iter()
            .filter(|(_, d)| d.is_scan())
            .map(|(n, _)| n)
            .collect()
    }

    /// Every rule violation; empty for a valid spec.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let n = self.model.n_sites();
        let spins = matches!(self.model, ModelSpec::Ising(_));
        let site_check = |site: usize, path: String, out: &mut Vec<Diagnostic>| {
            if site == 0 || site > n {
                out.push(Diagnostic::new(
                    codes::SITE_RANGE,
                    path,
                    format!("site {site} outside 1..={n}"),
                ));
            }
        };

        if self.units != self.model.units() {
            out.push(Diagnostic::new(
                codes::UNITS,
                "units",
                format!("{} models are written in `{}`, not `{}`", kind_name(spins), self.model.units(), self.units),
            ));
        }

        match &self.model {
            ModelSpec::Phonon(p) => {
                if p.n_ions == 0 {
                    out.push(Diagnostic::new(codes::MODEL, "model.n_ions", "chain needs at least one ion"));
                }
                if !(p.beta0 > 0.0 && p.beta0 < 1.0) {
                    out.push(Diagnostic::new(codes::MODEL, "model.beta0", format!("beta0 must lie in (0, 1), got {}", p.beta0)));
                }
                if !p.u.is_finite() {
                    out.push(Diagnostic::new(codes::MODEL, "model.U", "anharmonicity must be finite"));
                }
                if p.local_dim < 2 {
                    out.push(Diagnostic::new(codes::MODEL, "model.local_dim", "local dimension must be at least 2"));
                }
                for (i, b) in p.baths.iter().enumerate() {
                    site_check(b.site, format!("model.baths[{i}].site"), &mut out);
                    if !(b.nbar >= 0.0 && b.gamma >= 0.0 && b.nbar.is_finite() && b.gamma.is_finite()) {
                        out.push(Diagnostic::new(
                            codes::MODEL,
                            format!("model.baths[{i}]"),
                            "nbar and gamma must be finite and non-negative",
                        ));
                    }
                }
            }
            ModelSpec::Ising(p) => {
                if p.n_spins == 0 {
                    out.push(Diagnostic::new(codes::MODEL, "model.n_spins", "chain needs at least one spin"));
                }
                if ![p.j0, p.exponent, p.b].iter().all(|x| x.is_finite()) {
                    out.push(Diagnostic::new(codes::MODEL, "model", "J0, exponent and B must be finite"));
                }
            }
        }

        match &self.initial {
            InitialSpec::Ground => {}
            InitialSpec::SteadyState => {
                if !self.model.has_bath() {
                    out.push(Diagnostic::new(
                        codes::STEADY_STATE_BATH,
                        "initial",
                        "a steady-state initial state requires at least one bath with gamma > 0",
                    ));
                }
            }
            InitialSpec::Occupations(occ) => {
                let max = match &self.model {
                    ModelSpec::Phonon(p) => p.local_dim,
                    ModelSpec::Ising(_) => 2,
                };
                if occ.len() != n {
                    out.push(Diagnostic::new(
                        codes::INITIAL,
                        "initial.occupations",
                        format!("{} occupations for {n} sites", occ.len()),
                    ));
                } else if let Some(k) = occ.iter().position(|&o| o >= max) {
                    out.push(Diagnostic::new(
                        codes::INITIAL,
                        format!("initial.occupations[{k}]"),
                        format!("occupation {} not below the local dimension {max}", occ[k]),
                    ));
                } else if let ModelSpec::Phonon(PhononSpec { excitation_cap: Some(cap), .. }) = &self.model {
                    if occ.iter().sum::<usize>() > *cap {
                        out.push(Diagnostic::new(
                            codes::INITIAL,
                            "initial.occupations",
                            format!("total occupation exceeds the excitation cap {cap}"),
                        ));
                    }
                }
            }
        }

        if self.pulses.is_empty() {
            out.push(Diagnostic::new(codes::NO_PULSES, "pulses", "at least one pulse is required"));
        }
        for (i, p) in self.pulses.iter().enumerate() {
            let path = format!("pulses[{i}]");
            for s in p.sites() {
                site_check(s, format!("{path}.site"), &mut out);
            }
            if p.phase().is_empty() {
                out.push(Diagnostic::new(codes::PULSE, format!("{path}.phase"), "phase variable name is empty"));
            }
            match p {
                PulseSpec::SpinPi2 { .. } if !spins => out.push(Diagnostic::new(
                    codes::PULSE_MODEL,
                    path.as_str(),
                    "spin-pi2 pulses need a spin model",
                )),
                PulseSpec::Displacement { .. } | PulseSpec::Raise { .. } | PulseSpec::Lower { .. } if spins => {
                    out.push(Diagnostic::new(codes::PULSE_MODEL, path.as_str(), "motional pulses need a phonon model"))
                }
                PulseSpec::Displacement { epsilon, .. } if !(*epsilon > 0.0 && epsilon.is_finite()) => {
                    out.push(Diagnostic::new(codes::PULSE, format!("{path}.epsilon"), "epsilon must be positive"))
                }
                PulseSpec::Raise { amplitude, .. } | PulseSpec::Lower { amplitude, .. }
                    if !(*amplitude != 0.0 && amplitude.is_finite()) =>
                {
                    out.push(Diagnostic::new(codes::PULSE, format!("{path}.amplitude"), "amplitude must be nonzero"))
                }
                PulseSpec::Generic {
                    sites,
                    alpha,
                    beta,
                    gamma,
                    ..
                } => {
                    if sites.is_empty() {
                        out.push(Diagnostic::new(codes::PULSE, format!("{path}.sites"), "no sites given"));
                    }
                    if !(alpha.is_finite() && beta.is_finite() && gamma.is_finite()) || (*beta == 0.0 && *gamma == 0.0) {
                        out.push(Diagnostic::new(
                            codes::PULSE,
                            path.as_str(),
                            "amplitudes must be finite with beta or gamma nonzero",
                        ));
                    }
                }
                _ => {}
            }
        }

        if self.delays.len() != self.pulses.len() {
            out.push(Diagnostic::new(
                codes::DELAY_COUNT,
                "delays",
                format!("{} delays for {} pulses", self.delays.len(), self.pulses.len()),
            ));
        }
        let expected: Vec<String> = (0..self.pulses.len()).map(delay_name).collect();
        for (name, d) in &self.delays {
            let path = format!("delays.{name}");
            if !expected.contains(name) {
                out.push(Diagnostic::new(
                    codes::DELAY_NAME,
                    path.as_str(),
                    format!("delay names must be t1..t{}", self.pulses.len()),
                ));
            }
            d.check(&path, &mut out);
        }

        let vars = self.phase_variables();
        if self.signature.len() != vars.len() {
            out.push(Diagnostic::new(
                codes::SIGNATURE_LENGTH,
                "signature",
                format!("{} coefficients for {} phase variables {:?}", self.signature.len(), vars.len(), vars),
            ));
        }
        if self.signature.iter().sum::<i32>() != 0 {
            out.push(Diagnostic::new(codes::SIGNATURE_SUM, "signature", "signature must sum to zero"));
        }

        site_check(self.readout.site, "readout.site".into(), &mut out);
        let readout_ok = match self.readout.kind {
            ReadoutKind::SigmaZ => spins,
            ReadoutKind::Motional | ReadoutKind::Number => !spins,
        };
        if !readout_ok {
            out.push(Diagnostic::new(
                codes::OBSERVABLE_MODEL,
                "readout.kind",
                format!("{:?} readout is not defined on a {} model", self.readout.kind, kind_name(spins)),
            ));
        }

        if let Some(grid) = &self.phase_grid {
            if let Some(ls) = &grid.lengths {
                if ls.len() != vars.len() {
                    out.push(Diagnostic::new(
                        codes::PHASE_GRID,
                        "phase_grid.lengths",
                        format!("{} lengths for {} phase variables", ls.len(), vars.len()),
                    ));
                }
                if ls.contains(&0) {
                    out.push(Diagnostic::new(codes::PHASE_GRID, "phase_grid.lengths", "lengths must be positive"));
                }
            }
        }

        if let Some(t) = &self.transform {
            let scanned = self.scanned_axes();
            if t.axes.is_empty() {
                out.push(Diagnostic::new(codes::TRANSFORM, "transform.axes", "no axes to transform"));
            }
            for (i, a) in t.axes.iter().enumerate() {
                if !scanned.contains(a) {
                    out.push(Diagnostic::new(
                        codes::TRANSFORM,
                        format!("transform.axes[{i}]"),
                        format!("`{a}` is not a scanned delay"),
                    ));
                } else if t.axes[..i].contains(a) {
                    out.push(Diagnostic::new(codes::TRANSFORM, format!("transform.axes[{i}]"), "axis listed twice"));
                }
            }
            if !(t.apodization.len() <= 1 || t.apodization.len() == t.axes.len()) {
                out.push(Diagnostic::new(
                    codes::TRANSFORM,
                    "transform.apodization",
                    "give one rate per axis or a single rate",
                ));
            }
            if t.apodization.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                out.push(Diagnostic::new(codes::TRANSFORM, "transform.apodization", "rates must be non-negative"));
            }
            if t.zero_pad == 0 {
                out.push(Diagnostic::new(codes::TRANSFORM, "transform.zero_pad", "zero_pad must be at least 1"));
            }
            for (i, f) in t.flip.iter().enumerate() {
                if !t.axes.contains(f) {
                    out.push(Diagnostic::new(
                        codes::TRANSFORM,
                        format!("transform.flip[{i}]"),
                        format!("`{f}` is not a transformed axis"),
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let diags = self.diagnostics();
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::Protocol(diags))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("protocol specs serialize")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("protocol specs serialize")
    }

    /// Reduced-cost variant: `points` samples per scanned axis at the same
    /// step, excitation cap at most `cap`, local dimension at most `cap + 1`.
    pub fn reduced(&self, points: usize, cap: usize) -> Self {
        let mut out = self.clone();
        for d in out.delays.values_mut() {
            if let (true, Some(step)) = (d.is_scan(), d.resolved_step()) {
                let n = d.points.unwrap_or(points).min(points);
                *d = DelaySpec::scan_step(d.start.unwrap_or(0.0), step, n);
            }
        }
        if let ModelSpec::Phonon(p) = &mut out.model {
            p.excitation_cap = Some(p.excitation_cap.map_or(cap, |c| c.min(cap)));
            p.local_dim = p.local_dim.min(cap + 1);
        }
        out
    }

    /// Build the engine objects: model, initial state, readout, pulses and delays.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let model = self.model.to_model();
        let spins = !model.is_phonon();
        let layout = model.layout()?;
        let hamiltonian = model.hamiltonian()?;
        let dissipators = model.dissipators(&layout)?;
        let propagator = Arc::new(Propagator::for_model(&hamiltonian, &dissipators)?);
        let initial = match &self.initial {
            InitialSpec::Ground => DensityMatrix::ground_state(&hamiltonian)?,
            InitialSpec::SteadyState => propagator.steady_state()?,
            InitialSpec::Occupations(occ) => DensityMatrix::basis_state(&layout, occ)?,
        };
        let observable = self.readout.to_observable(&layout)?;
        let interactions = self
            .pulses
            .iter()
            .map(|p| p.to_interaction(spins))
            .collect::<Result<Vec<_>>>()?;
        let jumps: Vec<Operator> = dissipators.iter().map(|d| d.jump().clone()).collect();
        let excitation = model.excitation_number(&layout);
        let experiment = Experiment::new(
            propagator.clone(),
            &initial,
            &observable,
            interactions,
            Some(&excitation),
            Some(&hamiltonian),
            &jumps,
        )?;
        let delays = self.ordered_delays().iter().map(|(n, d)| d.to_delay(n)).collect();
        Ok(Prepared {
            spec: self.clone(),
            model,
            hamiltonian,
            initial,
            propagator,
            experiment,
            delays,
            signature: PhaseSignature::new(self.signature.clone())?,
        })
    }
}

fn kind_name(spins: bool) -> &'static str {
    if spins {
        "ising"
    } else {
        "phonon"
    }
}

/// Engine objects built from a spec.
#[derive(Debug)]
pub struct Prepared {
    pub spec: ProtocolSpec,
    pub model: Model,
    pub hamiltonian: Operator,
    pub initial: DensityMatrix,
    pub propagator: Arc<Propagator>,
    pub experiment: Experiment,
    pub delays: Vec<Delay>,
    pub signature: PhaseSignature,
}

/// Signal of one run plus engine bookkeeping.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub signal: SignalGrid,
    /// `max|cycled − direct| / max|cycled|` when both engines ran.
    pub deviation: Option<f64>,
    pub pathway_count: Option<usize>,
    pub phase_grid: Option<Vec<usize>>,
}

/// `max|a − b| / max|a|` (absolute when `a` vanishes).
pub fn relative_deviation(a: &ArrayD<C64>, b: &ArrayD<C64>) -> f64 {
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

impl Prepared {
    pub fn phase_grid(&self) -> PhaseGrid {
        self.spec.phase_grid.clone().unwrap_or_default()
    }

    pub fn axes(&self) -> Vec<Axis> {
        self.delays
            .iter()
            .filter_map(|d| match d {
                Delay::Scan(a) => Some(a.clone()),
                Delay::Fixed(_) => None,
            })
            .collect()
    }

    /// Sum of the enumerated pathways, and their number.
    pub fn direct(&self) -> Result<(ArrayD<C64>, usize)> {
        let pathways = self.experiment.enumerate(&self.signature, true)?;
        let values = self.experiment.evaluate_pathways(&pathways, &self.delays)?;
        Ok((values, pathways.len()))
    }

    pub fn cycled(&self) -> Result<ArrayD<C64>> {
        self.experiment.phase_cycled(&self.signature, &self.phase_grid(), &self.delays)
    }

    pub fn run(&self) -> Result<RunOutput> {
        self.run_with(self.spec.method)
    }

    pub fn run_with(&self, method: Method) -> Result<RunOutput> {
        let grid_lengths = || -> Result<Vec<usize>> { Ok(self.experiment.resolve_phase_grid(&self.phase_grid())?.0) };
        let (values, deviation, count, lengths) = match method {
            Method::PhaseCycling => (self.cycled()?, None, None, Some(grid_lengths()?)),
            Method::Direct => {
                let (v, n) = self.direct()?;
                (v, None, Some(n), None)
            }
            Method::Both => {
                let cycled = self.cycled()?;
                let (direct, n) = self.direct()?;
                let dev = relative_deviation(&cycled, &direct);
                (cycled, Some(dev), Some(n), Some(grid_lengths()?))
            }
        };
        let mut signal = SignalGrid::new(self.axes(), values, self.model.units())?;
        signal.fixed = self
            .delays
            .iter()
            .enumerate()
            .filter_map(|(k, d)| match d {
                Delay::Fixed(v) => Some((delay_name(k), *v)),
                Delay::Scan(_) => None,
            })
            .collect();
        let meta = &mut signal.metadata;
        if let Some(name) = &self.spec.name {
            meta.insert("protocol".into(), json!(name));
        }
        meta.insert("method".into(), json!(method.to_string()));
        meta.insert("signature".into(), json!(self.signature.coefficients()));
        meta.insert("phase_variables".into(), json!(phase_variables(self.experiment.pulses())));
        meta.insert("propagator".into(), json!(self.propagator.method()));
        meta.insert("hilbert_dim".into(), json!(self.experiment.layout().dim()));
        meta.insert("closed".into(), json!(self.propagator.is_closed()));
        if let Some(l) = &lengths {
            meta.insert("phase_grid".into(), json!(l));
        }
        if let Some(n) = count {
            meta.insert("pathways".into(), json!(n));
        }
        if let Some(d) = deviation {
            meta.insert("engine_deviation".into(), json!(d));
        }
        Ok(RunOutput {
            signal,
            deviation,
            pathway_count: count,
            phase_grid: lengths,
        })
    }

    /// Apply the protocol's transform block, if any.
    pub fn spectrum(&self, signal: &SignalGrid) -> Result<Option<SpectrumGrid>> {
        self.spec
            .transform
            .as_ref()
            .map(|t| t.apply(signal, self.propagator.is_closed()))
            .transpose()
    }
}

fn locate(err: &serde_json::Error) -> (Option<usize>, Option<usize>) {
    if err.line() == 0 {
        (None, None)
    } else {
        (Some(err.line()), Some(err.column()))
    }
}

/// Parse and validate a protocol document.
pub fn parse_protocol(text: &str) -> Result<ProtocolSpec> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: ProtocolSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let code = match inner.classify() {
            serde_json::error::Category::Data => codes::SCHEMA,
            _ => codes::SYNTAX,
        };
        let (line, column) = locate(&inner);
        Error::Protocol(vec![Diagnostic {
            code: code.into(),
            path: if path == "." { String::new() } else { path },
            message: inner.to_string(),
            line,
            column,
        }])
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Parse an already-decoded JSON document.
pub fn parse_value(value: Value) -> Result<ProtocolSpec> {
    let spec: ProtocolSpec = serde_path_to_error::deserialize(value).map_err(|e| {
        Error::Protocol(vec![Diagnostic::new(
            codes::SCHEMA,
            e.path().to_string(),
            e.into_inner().to_string(),
        )])
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Apply `path=value` to a JSON document.
///
/// The path is dot separated; numeric segments index arrays. Missing object
/// keys are created so that optional fields can be set. The value is read as
/// JSON, or as a bare string when it is not valid JSON.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let bad = |m: String| Error::Protocol(vec![Diagnostic::new(codes::OVERRIDE, assignment, m)]);
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad("override must look like `path=value`".into()))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(bad(format!("malformed path `{path}`")));
    }
    let mut node = doc;
    for seg in &segments {
        node = match node {
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let len = items.len();
                let i: usize = seg
                    .parse()
                    .map_err(|_| bad(format!("`{seg}` is not an index into an array")))?;
                items
                    .get_mut(i)
                    .ok_or_else(|| bad(format!("index {i} out of range for {len} items")))?
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                match node {
                    Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
                    _ => unreachable!(),
                }
            }
            _ => return Err(bad(format!("`{seg}` does not name a field"))),
        };
    }
    *node = value;
    Ok(())
}

/// Parse a document after applying overrides in order.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<ProtocolSpec> {
    if overrides.is_empty() {
        return parse_protocol(text);
    }
    let mut doc: Value = serde_json::from_str(text).map_err(|e| {
        let (line, column) = locate(&e);
        Error::Protocol(vec![Diagnostic {
            code: codes::SYNTAX.into(),
            path: String::new(),
            message: e.to_string(),
            line,
            column,
        }])
    })?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    parse_value(doc)
}

/// Settings of the displacement-driven photon-echo experiments.
pub const PE_RATE: f64 = 0.0015;
pub const PE_NBAR: f64 = 0.1;
pub const PE_ANHARMONICITY: f64 = -0.03;
/// Population times of the photon-echo sweep, in units of `1/γ`.
pub const PE_POPULATION_TIMES: [f64; 3] = [0.0, 1.275, 2.55];

/// Displacement amplitude used by the phonon built-ins.
pub const BUILTIN_EPSILON: f64 = 0.1;

fn phonon_chain(u: f64, baths: Vec<BathSpec>) -> ModelSpec {
    ModelSpec::Phonon(PhononSpec {
        n_ions: 3,
        beta0: 0.1,
        u,
        local_dim: 4,
        excitation_cap: Some(4),
        baths,
    })
}

/// Same chain with room for the full excitation cap on every site; a thermal
/// steady state puts visible weight on four quanta at one ion.
fn warm_phonon_chain(u: f64, baths: Vec<BathSpec>) -> ModelSpec {
    let mut m = phonon_chain(u, baths);
    if let ModelSpec::Phonon(p) = &mut m {
        p.local_dim = 5;
    }
    m
}

fn displacements(sites: &[usize]) -> Vec<PulseSpec> {
    sites
        .iter()
        .enumerate()
        .map(|(k, &site)| PulseSpec::Displacement {
            site,
            phase: format!("p{}", k + 1),
            epsilon: BUILTIN_EPSILON,
        })
        .collect()
}

fn delays(list: Vec<DelaySpec>) -> BTreeMap<String, DelaySpec> {
    list.into_iter().enumerate().map(|(k, d)| (delay_name(k), d)).collect()
}

fn transform(axes: &[&str], apodization: Vec<f64>, flip: &[&str], scaling: Scaling) -> Option<TransformSpec> {
    Some(TransformSpec {
        axes: axes.iter().map(|s| s.to_string()).collect(),
        apodization,
        zero_pad: 1,
        flip: flip.iter().map(|s| s.to_string()).collect(),
        scaling,
    })
}

/// Ising SQC with spin flips and readout on spin 1.
pub fn sqc_builtin(b: f64) -> ProtocolSpec {
    ProtocolSpec {
        name: Some("sqc".into()),
        description: Some("Two pi/2 pulses on spin 1 of a five-spin Ising chain, sigma-z readout on spin 1".into()),
        units: "J0".into(),
        model: ModelSpec::Ising(IsingSpec {
            n_spins: 5,
            j0: 1.0,
            exponent: 1.0,
            b,
        }),
        initial: InitialSpec::Ground,
        pulses: vec![
            PulseSpec::SpinPi2 { site: 1, phase: "p1".into() },
            PulseSpec::SpinPi2 { site: 1, phase: "p2".into() },
        ],
        delays: delays(vec![DelaySpec::scan_step(0.0, 0.1, 128), DelaySpec::scan_step(0.0, 0.1, 128)]),
        signature: vec![1, -1],
        readout: ReadoutSpec {
            kind: ReadoutKind::SigmaZ,
            site: 1,
        },
        method: Method::PhaseCycling,
        phase_grid: None,
        transform: transform(&["t1", "t2"], vec![0.25], &["t1"], Scaling::Arcsinh),
    }
}

/// SQC of the three-ion chain between two baths with both pulses on `site`
/// and the readout on the center ion.
pub fn delta_sqc_builtin(site: usize, nbar_left: f64, nbar_right: f64) -> ProtocolSpec {
    let side = if site == 1 { "left" } else { "right" };
    ProtocolSpec {
        name: Some(format!("delta-sqc-{side}")),
        description: Some(format!(
            "Steady state of a three-ion chain between baths (nbar {nbar_left} on ion 1, {nbar_right} on ion 3); \
             both displacements on ion {site}, motional readout on ion 2. \
             Subtract the -right signal from the -left signal for the current-induced difference."
        )),
        units: "nu_x".into(),
        model: warm_phonon_chain(
            -0.025,
            vec![
                BathSpec {
                    site: 1,
                    nbar: nbar_left,
                    gamma: 0.01,
                },
                BathSpec {
                    site: 3,
                    nbar: nbar_right,
                    gamma: 0.01,
                },
            ],
        ),
        initial: InitialSpec::SteadyState,
        pulses: displacements(&[site, site]),
        delays: delays(vec![DelaySpec::scan_step(0.0, 1.25, 256), DelaySpec::scan_step(0.0, 2.5, 256)]),
        signature: vec![1, -1],
        readout: ReadoutSpec {
            kind: ReadoutKind::Motional,
            site: 2,
        },
        method: Method::PhaseCycling,
        phase_grid: None,
        transform: transform(&["t1", "t2"], vec![0.0], &["t1"], Scaling::Linear),
    }
}

/// DQC of the closed three-ion chain: pulses 1, 2 on ion 1, pulses 3, 4 and
/// readout on `probe`; `t1 = t3 = 0`.
pub fn dqc_builtin(u: f64, probe: usize) -> ProtocolSpec {
    let name = match (u == 0.0, probe) {
        (true, 1) => "dqc".to_string(),
        (true, p) => format!("dqc-probe{p}"),
        (false, 1) => "dqc-anharmonic".to_string(),
        (false, p) => format!("dqc-anharmonic-probe{p}"),
    };
    ProtocolSpec {
        name: Some(name),
        description: Some(format!(
            "Double quantum coherence, U = {u}; excitation on ion 1, pulses 3, 4 and readout on ion {probe}; \
             t2 and t4 are scanned, t1 = t3 = 0"
        )),
        units: "nu_x".into(),
        model: phonon_chain(u, Vec::new()),
        initial: InitialSpec::Ground,
        pulses: displacements(&[1, 1, probe, probe]),
        delays: delays(vec![
            DelaySpec::fixed(0.0),
            DelaySpec::scan_step(0.0, 0.7, 512),
            DelaySpec::fixed(0.0),
            DelaySpec::scan_step(0.0, 2.5, 256),
        ]),
        signature: vec![1, 1, -1, -1],
        readout: ReadoutSpec {
            kind: ReadoutKind::Motional,
            site: probe,
        },
        method: Method::PhaseCycling,
        phase_grid: None,
        transform: transform(&["t2", "t4"], Vec::new(), &["t2"], Scaling::Arcsinh),
    }
}

fn pe_model() -> ModelSpec {
    phonon_chain(
        PE_ANHARMONICITY,
        (1..=3)
            .map(|site| BathSpec {
                site,
                nbar: PE_NBAR,
                gamma: PE_RATE,
            })
            .collect(),
    )
}

fn pe_delays(t2: f64) -> BTreeMap<String, DelaySpec> {
    delays(vec![
        DelaySpec::scan_step(0.0, 1.2, 256),
        DelaySpec::fixed(t2),
        DelaySpec::scan_step(0.0, 1.2, 256),
        DelaySpec::fixed(0.0),
    ])
}

/// Photon echo on ion 1 of the three-ion chain in a thermal bath, at
/// population time `t2`.
pub fn pe_builtin(t2: f64) -> ProtocolSpec {
    ProtocolSpec {
        name: Some("pe".into()),
        description: Some(
            "Photon echo: four displacements and motional readout on ion 1, baths nbar 0.1, gamma 0.0015 on every ion; \
             t1 and t3 are scanned, t2 is the population time, t4 = 0"
                .into(),
        ),
        units: "nu_x".into(),
        model: pe_model(),
        initial: InitialSpec::Ground,
        pulses: displacements(&[1, 1, 1, 1]),
        delays: pe_delays(t2),
        signature: vec![-1, 1, 1, -1],
        readout: ReadoutSpec {
            kind: ReadoutKind::Motional,
            site: 1,
        },
        method: Method::PhaseCycling,
        phase_grid: None,
        transform: transform(&["t1", "t3"], vec![0.01], &["t3"], Scaling::Linear),
    }
}

/// Photon-echo diagrams selected by raise/lower pulses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeDiagram {
    Gsb,
    Ese,
    EsaA,
    EsaB,
}

impl PeDiagram {
    pub const ALL: [PeDiagram; 4] = [PeDiagram::Gsb, PeDiagram::Ese, PeDiagram::EsaA, PeDiagram::EsaB];

    pub fn name(self) -> &'static str {
        match self {
            PeDiagram::Gsb => "gsb",
            PeDiagram::Ese => "ese",
            PeDiagram::EsaA => "esaa",
            PeDiagram::EsaB => "esab",
        }
    }

    /// `true` for `V+`, `false` for `V−`, per pulse.
    pub fn raises(self) -> [bool; 4] {
        match self {
            PeDiagram::Gsb => [true, false, true, true],
            PeDiagram::Ese => [true, true, false, true],
            PeDiagram::EsaA => [true, true, true, false],
            PeDiagram::EsaB => [true, true, true, true],
        }
    }

    /// Factor that rescales this diagram from `V±` pulses of amplitude
    /// `amplitude` to weak displacements of amplitude `epsilon`.
    ///
    /// A single-arrow term of `VρV†` carries the other side's identity
    /// weight: `ε·1` for a displacement, `amp·α` for `V±`. Displacements put
    /// `−ε` on `a`, so each lowering pulse also flips the sign.
    pub fn weight(self, epsilon: f64, amplitude: f64) -> f64 {
        let r = epsilon / (amplitude * pulses::SELECTIVE_ALPHA);
        self.raises()
            .iter()
            .map(|&up| if up { r } else { -r })
            .product()
    }
}

/// Photon echo with raise/lower pulses selecting one diagram.
pub fn pe_diagram_builtin(diagram: PeDiagram, t2: f64) -> ProtocolSpec {
    let seq: Vec<&str> = diagram.raises().iter().map(|&u| if u { "V+" } else { "V-" }).collect();
    let pulses = diagram
        .raises()
        .iter()
        .enumerate()
        .map(|(k, &up)| {
            let phase = format!("p{}", k + 1);
            let amplitude = FRAC_1_SQRT_2;
            if up {
                PulseSpec::Raise { site: 1, phase, amplitude }
            } else {
                PulseSpec::Lower { site: 1, phase, amplitude }
            }
        })
        .collect();
    ProtocolSpec {
        name: Some(format!("pe-{}", diagram.name())),
        description: Some(format!(
            "Photon-echo {} diagram selected by the pulse sequence {}; multiply by {:e} to compare with the \
             displacement-driven echo",
            diagram.name().to_uppercase(),
            seq.join(", "),
            diagram.weight(BUILTIN_EPSILON, FRAC_1_SQRT_2)
        )),
        pulses,
        ..pe_builtin(t2)
    }
}

/// The named experiments, at their default settings.
pub fn builtin_protocols() -> BTreeMap<String, ProtocolSpec> {
    let mut specs = vec![
        sqc_builtin(0.5),
        delta_sqc_builtin(1, 0.0, 0.5),
        delta_sqc_builtin(3, 0.0, 0.5),
        dqc_builtin(0.0, 1),
        dqc_builtin(0.0, 2),
        dqc_builtin(-0.01, 1),
        dqc_builtin(-0.01, 2),
        pe_builtin(0.0),
    ];
    specs.extend(PeDiagram::ALL.iter().map(|&d| pe_diagram_builtin(d, 0.0)));
    specs
        .into_iter()
        .map(|s| (s.name.clone().expect("built-ins are named"), s))
        .collect()
}

pub fn builtin(name: &str) -> Option<ProtocolSpec> {
    builtin_protocols().remove(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes_of(e: Error) -> Vec<String> {
        match e {
            Error::Protocol(d) => d.into_iter().map(|d| d.code).collect(),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn builtins_validate_and_round_trip() {
        for (name, spec) in builtin_protocols() {
            assert!(spec.diagnostics().is_empty(), "{name}: {:?}", spec.diagnostics());
            let back = parse_protocol(&spec.to_json()).unwrap();
            assert_eq!(back, spec, "{name}");
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = sqc_builtin(0.5).to_value();
        v["pulses"][0]["sitee"] = json!(1);
        let text = serde_json::to_string_pretty(&v).unwrap();
        let e = parse_protocol(&text).unwrap_err();
        let Error::Protocol(d) = e else { panic!() };
        assert_eq!(d[0].code, codes::SCHEMA);
        assert!(d[0].path.starts_with("pulses[0]"), "{}", d[0].path);
        assert!(d[0].line.is_some());
    }

    #[test]
    fn invariant_codes() {
        let mut s = sqc_builtin(0.5);
        s.signature = vec![1, 1];
        assert_eq!(codes_of(s.validate().unwrap_err()), vec![codes::SIGNATURE_SUM]);

        let mut s = sqc_builtin(0.5);
        s.delays.remove("t2");
        s.transform = None;
        assert_eq!(codes_of(s.validate().unwrap_err()), vec![codes::DELAY_COUNT]);

        let mut s = sqc_builtin(0.5);
        s.readout.site = 6;
        assert_eq!(codes_of(s.validate().unwrap_err()), vec![codes::SITE_RANGE]);

        let mut s = sqc_builtin(0.5);
        s.initial = InitialSpec::SteadyState;
        assert_eq!(codes_of(s.validate().unwrap_err()), vec![codes::STEADY_STATE_BATH]);

        let mut s = sqc_builtin(0.5);
        s.readout.kind = ReadoutKind::Motional;
        assert_eq!(codes_of(s.validate().unwrap_err()), vec![codes::OBSERVABLE_MODEL]);

        let mut s = sqc_builtin(0.5);
        s.units = "nu_x".into();
        assert_eq!(codes_of(s.validate().unwrap_err()), vec![codes::UNITS]);

        assert_eq!(codes_of(parse_protocol("{ \"units\": ").unwrap_err()), vec![codes::SYNTAX]);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let text = sqc_builtin(0.5).to_json();
        let s = parse_with_overrides(
            &text,
            &["model.B=0.1".into(), "delays.t1.points=64".into(), "pulses.1.site=2".into()],
        )
        .unwrap();
        let ModelSpec::Ising(m) = &s.model else { panic!() };
        assert_eq!(m.b, 0.1);
        assert_eq!(s.delays["t1"].points, Some(64));
        assert_eq!(s.pulses[1].sites(), vec![2]);
        let e = parse_with_overrides(&text, &["model.C=1".into()]).unwrap_err();
        assert_eq!(codes_of(e), vec![codes::SCHEMA]);
    }

    #[test]
    fn reduced_keeps_step() {
        let s = pe_builtin(0.0).reduced(64, 3);
        let d = &s.delays["t1"];
        assert_eq!((d.step, d.points), (Some(1.2), Some(64)));
        let ModelSpec::Phonon(p) = &s.model else { panic!() };
        assert_eq!((p.excitation_cap, p.local_dim), (Some(3), 4));
    }

    #[test]
    fn diagram_weights() {
        let a = FRAC_1_SQRT_2;
        let e = 0.1;
        let w = (e / (a * a)).powi(4);
        assert!((PeDiagram::EsaB.weight(e, a) - w).abs() < 1e-15);
        assert!((PeDiagram::Gsb.weight(e, a) + w).abs() < 1e-15);
    }
}
