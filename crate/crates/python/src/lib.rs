//! Python bindings: protocols, runs, spectra and the exciton table.

use std::path::PathBuf;

use ionspec::linalg::C64;
use ionspec::models::{exciton_table as build_table, PhononChainParams};
use ionspec::protocol::{self, Method, ProtocolSpec, TransformSpec};
use ionspec::spectra::{self, Axis, Scaling, SignalGrid, SpectrumGrid};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(ionspec_py, InputError, PyValueError);
create_exception!(ionspec_py, NumericalError, PyRuntimeError);

fn to_py(e: ionspec::Error) -> PyErr {
    let text = match &e {
        ionspec::Error::Protocol(d) => d.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"),
        other => other.to_string(),
    };
    if e.is_numerical() {
        NumericalError::new_err(text)
    } else {
        InputError::new_err(text)
    }
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (value.to_string(),))?.unbind())
}

fn axes_tuple(axes: &[Axis]) -> Vec<(String, f64, f64, usize)> {
    axes.iter().map(|a| (a.name.clone(), a.start, a.step, a.count)).collect()
}

fn parse_method(m: &str) -> PyResult<Method> {
    m.parse().map_err(|e: ionspec::Error| to_py(e))
}

/// A validated protocol document.
#[pyclass(module = "ionspec_py", frozen)]
pub struct Protocol {
    spec: ProtocolSpec,
}

#[pymethods]
impl Protocol {
    /// Parse JSON text, applying `path=value` overrides first.
    #[staticmethod]
    #[pyo3(signature = (text, overrides = None))]
    fn from_json(text: &str, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let spec = protocol::parse_with_overrides(text, &overrides.unwrap_or_default()).map_err(to_py)?;
        Ok(Self { spec })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = None))]
    fn load(path: PathBuf, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| InputError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        protocol::builtin(name)
            .map(|spec| Self { spec })
            .ok_or_else(|| InputError::new_err(format!("no built-in protocol named `{name}`")))
    }

    fn to_json(&self) -> String {
        self.spec.to_json()
    }

    #[getter]
    fn name(&self) -> Option<String> {
        self.spec.name.clone()
    }

    #[getter]
    fn units(&self) -> String {
        self.spec.units.clone()
    }

    #[getter]
    fn scanned_axes(&self) -> Vec<String> {
        self.spec.scanned_axes()
    }

    /// Copy with at most `points` samples per scan and excitation cap `cap`.
    fn reduced(&self, points: usize, cap: usize) -> Self {
        Self {
            spec: self.spec.reduced(points, cap),
        }
    }

    /// Compute the signal. `method` is `phase-cycling`, `direct` or `both`.
    #[pyo3(signature = (method = None))]
    fn run(&self, py: Python<'_>, method: Option<&str>) -> PyResult<Signal> {
        let method = method.map(parse_method).transpose()?.unwrap_or(self.spec.method);
        let spec = self.spec.clone();
        let out = py
            .detach(move || spec.prepare().and_then(|p| p.run_with(method)))
            .map_err(to_py)?;
        Ok(Signal {
            grid: out.signal,
            deviation: out.deviation,
        })
    }

    /// Transform a signal as the protocol's `transform` block says, or over all
    /// scanned axes when there is none.
    fn spectrum(&self, signal: &Signal) -> PyResult<Spectrum> {
        let closed = signal.grid.metadata.get("closed").and_then(|v| v.as_bool()).unwrap_or(false);
        let t = self.spec.transform.clone().unwrap_or_else(|| TransformSpec {
            axes: self.spec.scanned_axes(),
            apodization: Vec::new(),
            zero_pad: 1,
            flip: Vec::new(),
            scaling: Scaling::Linear,
        });
        Ok(Spectrum {
            grid: t.apply(&signal.grid, closed).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Protocol({:?})", self.spec.name.as_deref().unwrap_or("unnamed"))
    }
}

/// Complex time-domain signal on a grid of delays.
#[pyclass(module = "ionspec_py", frozen)]
pub struct Signal {
    grid: SignalGrid,
    deviation: Option<f64>,
}

#[pymethods]
impl Signal {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            grid: SignalGrid::read(&path).map_err(to_py)?,
            deviation: None,
        })
    }

    /// Write `<stem>.csv` and `<stem>.meta.json` into `directory`.
    #[pyo3(signature = (directory, stem = "signal"))]
    fn write(&self, directory: PathBuf, stem: &str) -> PyResult<(PathBuf, PathBuf)> {
        self.grid.write(&directory, stem).map_err(to_py)
    }

    /// `(name, start, step, count)` per axis.
    #[getter]
    fn axes(&self) -> Vec<(String, f64, f64, usize)> {
        axes_tuple(&self.grid.axes)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.grid.values.shape().to_vec()
    }

    /// Values in row-major order; reshape with `shape`.
    #[getter]
    fn values(&self) -> Vec<C64> {
        self.grid.values.iter().copied().collect()
    }

    /// Largest relative gap between the two engines when run with `both`.
    #[getter]
    fn deviation(&self) -> Option<f64> {
        self.deviation
    }

    #[getter]
    fn metadata(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_to_py(py, &serde_json::Value::Object(self.grid.metadata.clone()))
    }

    fn __sub__(&self, other: &Signal) -> PyResult<Signal> {
        Ok(Signal {
            grid: spectra::difference_signal(&self.grid, &other.grid).map_err(to_py)?,
            deviation: None,
        })
    }

    /// One-sided Fourier transform over `axes` with exponential apodization.
    #[pyo3(signature = (axes, apodization = None, zero_pad = 1, flip = None, scaling = "linear"))]
    fn spectrum(
        &self,
        axes: Vec<String>,
        apodization: Option<Vec<f64>>,
        zero_pad: usize,
        flip: Option<Vec<String>>,
        scaling: &str,
    ) -> PyResult<Spectrum> {
        let scaling: Scaling = serde_json::from_value(serde_json::Value::String(scaling.into()))
            .map_err(|_| InputError::new_err(format!("unknown scaling `{scaling}`")))?;
        let t = TransformSpec {
            axes,
            apodization: apodization.unwrap_or_default(),
            zero_pad,
            flip: flip.unwrap_or_default(),
            scaling,
        };
        let closed = self.grid.metadata.get("closed").and_then(|v| v.as_bool()).unwrap_or(false);
        Ok(Spectrum {
            grid: t.apply(&self.grid, closed).map_err(to_py)?,
        })
    }
}

/// Spectrum over frequency and, for untransformed axes, delay coordinates.
#[pyclass(module = "ionspec_py", frozen)]
pub struct Spectrum {
    grid: SpectrumGrid,
}

#[pymethods]
impl Spectrum {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            grid: SpectrumGrid::read(&path).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (directory, stem = "spectrum"))]
    fn write(&self, directory: PathBuf, stem: &str) -> PyResult<(PathBuf, PathBuf)> {
        self.grid.write(&directory, stem).map_err(to_py)
    }

    #[getter]
    fn axes(&self) -> Vec<(String, f64, f64, usize)> {
        axes_tuple(&self.grid.axes)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.grid.values.shape().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<C64> {
        self.grid.values.iter().copied().collect()
    }

    #[getter]
    fn metadata(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_to_py(py, &serde_json::Value::Object(self.grid.metadata.clone()))
    }

    /// Local maxima of `|S|` above `threshold · max|S|`, strongest first.
    #[pyo3(signature = (threshold = 0.05))]
    fn peaks<'py>(&self, py: Python<'py>, threshold: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        spectra::find_peaks(&self.grid, threshold)
            .map_err(to_py)?
            .into_iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("position", p.position)?;
                d.set_item("index", p.index)?;
                d.set_item("amplitude", p.amplitude)?;
                d.set_item("magnitude", p.magnitude)?;
                d.set_item("prominence", p.prominence)?;
                Ok(d)
            })
            .collect()
    }
}

#[pyfunction]
fn builtin_names() -> Vec<String> {
    protocol::builtin_protocols().into_keys().collect()
}

/// Single- and two-exciton energies of a harmonic or anharmonic phonon chain.
#[pyfunction]
#[pyo3(signature = (n_ions, beta0, u = 0.0, local_dim = 4, excitation_cap = 4))]
fn exciton_table<'py>(
    py: Python<'py>,
    n_ions: usize,
    beta0: f64,
    u: f64,
    local_dim: usize,
    excitation_cap: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let params = PhononChainParams::new(n_ions, beta0, u).with_cutoff(local_dim, Some(excitation_cap));
    let t = build_table(&params).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("single_energies", &t.single_energies)?;
    let rows: Vec<Vec<f64>> = t.single_coeffs.rows().into_iter().map(|r| r.to_vec()).collect();
    d.set_item("single_coefficients", rows)?;
    d.set_item("double_energies", &t.double_energies)?;
    Ok(d)
}

#[pymodule]
fn ionspec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("InputError", m.py().get_type::<InputError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<Protocol>()?;
    m.add_class::<Signal>()?;
    m.add_class::<Spectrum>()?;
    m.add_function(wrap_pyfunction!(builtin_names, m)?)?;
    m.add_function(wrap_pyfunction!(exciton_table, m)?)?;
    Ok(())
}
