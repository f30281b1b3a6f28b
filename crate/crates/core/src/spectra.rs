//! Time-domain signal grids, their one-sided Fourier transforms, peak finding
//! and CSV/JSON serialization.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Axis as NdAxis, Dimension, IxDyn};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg::{C64, ZERO};

/// A uniform axis `start + k·step`, `k = 0..count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(name: impl Into<String>, start: f64, step: f64, count: usize) -> Self {
        Self {
            name: name.into(),
            start,
            step,
            count,
        }
    }

    /// Check that the axis can carry a delay scan.
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::InvalidParameter(format!(
                "axis `{}` needs at least 2 points",
                self.name
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "axis `{}` needs a positive step",
                self.name
            )));
        }
        if self.start < 0.0 || !self.start.is_finite() {
            return Err(Error::NegativeTime(self.start));
        }
        Ok(())
    }

    pub fn value(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.value(k)).collect()
    }

    pub fn end(&self) -> f64 {
        self.value(self.count.saturating_sub(1))
    }

    fn matches(&self, other: &Axis) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        self.name == other.name
            && self.count == other.count
            && close(self.start, other.start)
            && close(self.step, other.step)
    }
}

/// Complex samples on the scanned delays of a protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalGrid {
    pub axes: Vec<Axis>,
    pub fixed: BTreeMap<String, f64>,
    pub values: ArrayD<C64>,
    pub units: String,
    pub metadata: Map<String, Value>,
}

impl SignalGrid {
    pub fn new(axes: Vec<Axis>, values: ArrayD<C64>, units: impl Into<String>) -> Result<Self> {
        for a in &axes {
            a.validate()?;
        }
        let shape: Vec<usize> = axes.iter().map(|a| a.count).collect();
        if values.shape() != shape.as_slice() {
            return Err(Error::AxisMismatch(format!(
                "values have shape {:?}, axes {:?}",
                values.shape(),
                shape
            )));
        }
        Ok(Self {
            axes,
            fixed: BTreeMap::new(),
            values,
            units: units.into(),
            metadata: Map::new(),
        })
    }

    fn axis_index(&self, name: &str) -> Result<usize> {
        self.axes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAxis(name.to_string()))
    }
}

/// Display scaling of spectrum values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    #[default]
    Linear,
    /// `asinh(|S|) e^{i arg S}`.
    Arcsinh,
}

/// Transformed grid; `frequency[i]` tells whether axis `i` is a frequency axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumGrid {
    pub axes: Vec<Axis>,
    pub frequency: Vec<bool>,
    pub values: ArrayD<C64>,
    pub scaling: Scaling,
    pub units: String,
    pub metadata: Map<String, Value>,
}

impl SpectrumGrid {
    pub fn axis_index(&self, name: &str) -> Result<usize> {
        self.axes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAxis(name.to_string()))
    }

    /// Largest magnitude on the grid.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Name of the frequency axis conjugate to a time axis `t1` → `w1`.
pub fn frequency_axis_name(time_axis: &str) -> String {
    match time_axis.strip_prefix('t') {
        Some(rest) if !rest.is_empty() => format!("w{rest}"),
        _ => format!("w_{time_axis}"),
    }
}

/// One-sided transform `S(Ω) = ∫_0^∞ dt e^{−iΩt} e^{−ηt} s(t)` along the named axes.
///
/// Samples get weight `Δt` (half of it for a sample at `t = 0`), each axis is
/// zero-padded to `zero_pad · count` points and the result is centered with
/// frequencies `(j − ⌊N/2⌋)·2π/(NΔt)`.
pub fn fourier_nd(grid: &SignalGrid, axes: &[&str], apodization: &[f64], zero_pad: usize) -> Result<SpectrumGrid> {
    if apodization.len() != axes.len() {
        return Err(Error::AxisMismatch(format!(
            "{} apodization rates for {} axes",
            apodization.len(),
            axes.len()
        )));
    }
    if let Some(eta) = apodization.iter().find(|&&e| !(e >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "apodization rate must be non-negative, got {eta}"
        )));
    }
    if zero_pad == 0 {
        return Err(Error::InvalidParameter("zero-pad factor must be at least 1".into()));
    }
    let mut values = grid.values.clone();
    let mut out_axes = grid.axes.clone();
    let mut frequency = vec![false; grid.axes.len()];
    let mut planner = FftPlanner::<f64>::new();
    for (name, &eta) in axes.iter().zip(apodization) {
        let k = grid.axis_index(name)?;
        if frequency[k] {
            return Err(Error::AxisMismatch(format!("axis `{name}` listed twice")));
        }
        let ax = &grid.axes[k];
        let n = ax.count;
        let padded = n * zero_pad;
        let fft = planner.plan_fft_forward(padded);
        let d_omega = 2.0 * PI / (padded as f64 * ax.step);
        let half = padded / 2;
        let mut shape = values.shape().to_vec();
        shape[k] = padded;
        let mut out = ArrayD::<C64>::zeros(IxDyn(&shape));
        let weights: Vec<f64> = (0..n)
            .map(|j| {
                let t = ax.value(j);
                let trap = if j == 0 && ax.start == 0.0 { 0.5 } else { 1.0 };
                trap * ax.step * (-eta * t).exp()
            })
            .collect();
        let mut buffer = vec![ZERO; padded];
        for (lane_in, mut lane_out) in values
            .lanes(NdAxis(k))
            .into_iter()
            .zip(out.lanes_mut(NdAxis(k)))
        {
            buffer.iter_mut().for_each(|z| *z = ZERO);
            for (j, (&x, &w)) in lane_in.iter().zip(&weights).enumerate() {
                buffer[j] = x * w;
            }
            fft.process(&mut buffer);
            for (j, slot) in lane_out.iter_mut().enumerate() {
                // centered index j ↔ FFT bin (j − half) mod padded
                let bin = (j + padded - half) % padded;
                let omega = (j as f64 - half as f64) * d_omega;
                *slot = buffer[bin] * C64::from_polar(1.0, -omega * ax.start);
            }
        }
        values = out;
        out_axes[k] = Axis::new(
            frequency_axis_name(&ax.name),
            -(half as f64) * d_omega,
            d_omega,
            padded,
        );
        frequency[k] = true;
    }
    let mut metadata = grid.metadata.clone();
    metadata.insert(
        "transform".into(),
        serde_json::json!({
            "axes": axes,
            "apodization": apodization,
            "zero_pad": zero_pad,
            "kernel": "exp(-i*Omega*t)",
        }),
    );
    Ok(SpectrumGrid {
        axes: out_axes,
        frequency,
        values,
        scaling: Scaling::Linear,
        units: grid.units.clone(),
        metadata,
    })
}

/// Negate the named axes, reversing the data so that `Ω ↦ −Ω`.
pub fn flip_axes(spectrum: &SpectrumGrid, axes: &[&str]) -> Result<SpectrumGrid> {
    let mut out = spectrum.clone();
    for name in axes {
        let k = out.axis_index(name)?;
        out.values.invert_axis(NdAxis(k));
        let ax = &mut out.axes[k];
        ax.start = -(ax.start + (ax.count as f64 - 1.0) * ax.step);
        out.values = out.values.as_standard_layout().to_owned();
    }
    let flipped: Vec<Value> = out
        .metadata
        .get("flipped")
        .and_then(Value::as_array)
        .cloned()
        .unwrap_or_default();
    let mut set: Vec<String> = flipped.iter().filter_map(|v| v.as_str().map(String::from)).collect();
    for name in axes {
        if let Some(pos) = set.iter().position(|s| s == name) {
            set.remove(pos);
        } else {
            set.push(name.to_string());
        }
    }
    out.metadata.insert("flipped".into(), serde_json::json!(set));
    Ok(out)
}

/// Elementwise `asinh(|S|)` keeping the phase.
pub fn arcsinh_scale(spectrum: &SpectrumGrid) -> SpectrumGrid {
    let mut out = spectrum.clone();
    if spectrum.scaling == Scaling::Arcsinh {
        return out;
    }
    out.values = spectrum.values.mapv(|z| {
        let r = z.norm();
        if r == 0.0 {
            ZERO
        } else {
            z * (r.asinh() / r)
        }
    });
    out.scaling = Scaling::Arcsinh;
    out
}

/// Inverse of [`arcsinh_scale`].
pub fn linear_scale(spectrum: &SpectrumGrid) -> SpectrumGrid {
    let mut out = spectrum.clone();
    if spectrum.scaling == Scaling::Linear {
        return out;
    }
    out.values = spectrum.values.mapv(|z| {
        let r = z.norm();
        if r == 0.0 {
            ZERO
        } else {
            z * (r.sinh() / r)
        }
    });
    out.scaling = Scaling::Linear;
    out
}

/// Local maximum of `|S|`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Peak {
    /// Interpolated coordinate per axis.
    pub position: Vec<f64>,
    pub index: Vec<usize>,
    pub amplitude: C64,
    pub magnitude: f64,
    /// Height above the lowest point of the surrounding 3^d cell block.
    pub prominence: f64,
}

/// Strict local maxima of `|S|` above `threshold · max|S|`, strongest first.
pub fn find_peaks(spectrum: &SpectrumGrid, threshold: f64) -> Result<Vec<Peak>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "peak threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mag = spectrum.values.mapv(|z| z.norm());
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(Vec::new());
    }
    let shape = mag.shape().to_vec();
    let dims = shape.len();
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(dims as u32))
        .map(|mut c| {
            (0..dims)
                .map(|_| {
                    let o = (c % 3) as i64 - 1;
                    c /= 3;
                    o
                })
                .collect()
        })
        .filter(|o: &Vec<i64>| o.iter().any(|&x| x != 0))
        .collect();
    let neighbor = |idx: &[usize], off: &[i64]| -> Option<Vec<usize>> {
        idx.iter()
            .zip(off)
            .zip(&shape)
            .map(|((&i, &o), &n)| {
                let j = i as i64 + o;
                (j >= 0 && j < n as i64).then_some(j as usize)
            })
            .collect()
    };
    let mut peaks = Vec::new();
    for (idx, &v) in mag.indexed_iter() {
        if v < threshold * max {
            continue;
        }
        let idx = idx.slice().to_vec();
        let mut is_max = true;
        let mut lowest = v;
        for off in &offsets {
            if let Some(nb) = neighbor(&idx, off) {
                let w = mag[IxDyn(&nb)];
                if w >= v {
                    is_max = false;
                    break;
                }
                lowest = lowest.min(w);
            }
        }
        if !is_max {
            continue;
        }
        let position = (0..dims)
            .map(|a| {
                let ax = &spectrum.axes[a];
                let mut delta = 0.0;
                if idx[a] > 0 && idx[a] + 1 < shape[a] {
                    let mut lo = idx.clone();
                    lo[a] -= 1;
                    let mut hi = idx.clone();
                    hi[a] += 1;
                    let (ym, yp) = (mag[IxDyn(&lo)], mag[IxDyn(&hi)]);
                    let denom = ym - 2.0 * v + yp;
                    if denom < 0.0 {
                        delta = (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5);
                    }
                }
                ax.start + (idx[a] as f64 + delta) * ax.step
            })
            .collect();
        peaks.push(Peak {
            position,
            amplitude: spectrum.values[IxDyn(&idx)],
            index: idx,
            magnitude: v,
            prominence: v - lowest,
        });
    }
    peaks.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
    Ok(peaks)
}

/// `a − b` on identical axes.
pub fn difference_signal(a: &SignalGrid, b: &SignalGrid) -> Result<SignalGrid> {
    if a.axes.len() != b.axes.len() || !a.axes.iter().zip(&b.axes).all(|(x, y)| x.matches(y)) {
        return Err(Error::AxisMismatch("signals are sampled on different axes".into()));
    }
    if a.units != b.units {
        return Err(Error::AxisMismatch(format!(
            "units differ: {} vs {}",
            a.units, b.units
        )));
    }
    let mut metadata = Map::new();
    metadata.insert("minuend".into(), Value::Object(a.metadata.clone()));
    metadata.insert("subtrahend".into(), Value::Object(b.metadata.clone()));
    Ok(SignalGrid {
        axes: a.axes.clone(),
        fixed: a.fixed.clone(),
        values: &a.values - &b.values,
        units: a.units.clone(),
        metadata,
    })
}

/// Sidecar describing a CSV grid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub kind: GridKind,
    pub axes: Vec<Axis>,
    #[serde(default)]
    pub frequency: Vec<bool>,
    #[serde(default)]
    pub fixed: BTreeMap<String, f64>,
    pub units: String,
    #[serde(default)]
    pub scaling: Scaling,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    Signal,
    Spectrum,
}

/// `<dir>/<stem>.csv` and `<dir>/<stem>.meta.json`.
pub fn grid_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.meta.json")))
}

fn write_csv(path: &Path, axes: &[Axis], values: &ArrayD<C64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = axes.iter().map(|a| a.name.clone()).collect();
    header.push("re".into());
    header.push("im".into());
    w.write_record(&header).map_err(csv_error)?;
    for (idx, z) in values.indexed_iter() {
        let mut row: Vec<String> = idx
            .slice()
            .iter()
            .zip(axes)
            .map(|(&k, a)| format!("{:.16e}", a.value(k)))
            .collect();
        row.push(format!("{:.16e}", z.re));
        row.push(format!("{:.16e}", z.im));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn read_csv(path: &Path, shape: &[usize]) -> Result<ArrayD<C64>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let n_axes = shape.len();
    let mut flat = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::InvalidParameter(format!("{}: short row", path.display())))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))
        };
        flat.push(C64::new(field(n_axes)?, field(n_axes + 1)?));
    }
    ArrayD::from_shape_vec(IxDyn(shape), flat)
        .map_err(|e| Error::AxisMismatch(format!("{}: {e}", path.display())))
}

impl SignalGrid {
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let (csv_path, meta_path) = grid_paths(dir, stem);
        write_csv(&csv_path, &self.axes, &self.values)?;
        let meta = GridMeta {
            kind: GridKind::Signal,
            axes: self.axes.clone(),
            frequency: vec![false; self.axes.len()],
            fixed: self.fixed.clone(),
            units: self.units.clone(),
            scaling: Scaling::Linear,
            shape: self.values.shape().to_vec(),
            metadata: self.metadata.clone(),
        };
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok((csv_path, meta_path))
    }

    /// Read a grid from its CSV file (the sidecar is located next to it).
    pub fn read(csv_path: &Path) -> Result<Self> {
        let meta = read_meta(csv_path)?;
        if meta.kind != GridKind::Signal {
            return Err(Error::InvalidParameter(format!(
                "{} holds a spectrum, not a time-domain signal",
                csv_path.display()
            )));
        }
        let values = read_csv(csv_path, &meta.shape)?;
        Ok(Self {
            axes: meta.axes,
            fixed: meta.fixed,
            values,
            units: meta.units,
            metadata: meta.metadata,
        })
    }
}

impl SpectrumGrid {
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let (csv_path, meta_path) = grid_paths(dir, stem);
        write_csv(&csv_path, &self.axes, &self.values)?;
        let meta = GridMeta {
            kind: GridKind::Spectrum,
            axes: self.axes.clone(),
            frequency: self.frequency.clone(),
            fixed: BTreeMap::new(),
            units: self.units.clone(),
            scaling: self.scaling,
            shape: self.values.shape().to_vec(),
            metadata: self.metadata.clone(),
        };
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok((csv_path, meta_path))
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let meta = read_meta(csv_path)?;
        if meta.kind != GridKind::Spectrum {
            return Err(Error::InvalidParameter(format!(
                "{} holds a signal, not a spectrum",
                csv_path.display()
            )));
        }
        let values = read_csv(csv_path, &meta.shape)?;
        Ok(Self {
            axes: meta.axes,
            frequency: meta.frequency,
            values,
            scaling: meta.scaling,
            units: meta.units,
            metadata: meta.metadata,
        })
    }
}

/// Sidecar of a CSV grid: `x.csv` → `x.meta.json`.
pub fn read_meta(csv_path: &Path) -> Result<GridMeta> {
    let meta_path = csv_path.with_extension("meta.json");
    let text = fs::read_to_string(&meta_path)?;
    Ok(serde_json::from_str(&text)?)
}
