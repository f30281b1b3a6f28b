use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ionspec::models::{chain_couplings, equilibrium_positions, exciton_table, Model};
use ionspec::protocol::{parse_with_overrides, ProtocolSpec, TransformSpec};
use ionspec::spectra::{difference_signal, Scaling, SignalGrid, SpectrumGrid};
use log::{info, warn};
use serde_json::{json, Value};

mod manifest;
mod render;

use manifest::{sha256_hex, Manifest};
use render::Component;

/// Engine deviation above which a run is flagged.
const DEVIATION_LIMIT: f64 = 1e-8;
const CI_POINTS: usize = 64;
const CI_CAP: usize = 3;
const CACHE_ENV: &str = "IONSPEC_CACHE_DIR";

#[derive(Parser)]
#[command(name = "ionspec", version, about = "Multidimensional spectroscopy of ion chains")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a protocol and write its time-domain signal.
    Signal {
        protocol: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fourier transform a signal grid.
    Spectrum(SpectrumArgs),
    /// Draw a 2D spectrum as an SVG heatmap.
    Render {
        spectrum: PathBuf,
        #[arg(short, long, default_value = "spectrum.svg")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "abs")]
        component: Component,
        /// Horizontal range `lo,hi`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        xlim: Option<Vec<f64>>,
        /// Vertical range `lo,hi`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        ylim: Option<Vec<f64>>,
    },
    /// Repeat `signal` over a list of values of one parameter.
    Sweep {
        protocol: PathBuf,
        /// Dotted path of the swept field, e.g. `model.B`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(short, long, default_value = "sweep")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print Hamiltonian spectrum, exciton table and chain geometry as JSON.
    Model {
        protocol: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Override a protocol field, `path=value`.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Also write the spectrum described by the protocol's transform block.
    #[arg(long)]
    spectrum: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Reduced grids and cutoffs for quick checks; not publication quality.
    Ci,
}

#[derive(Args)]
struct SpectrumArgs {
    signal: PathBuf,
    /// Signal subtracted before the transform.
    #[arg(long)]
    subtract: Option<PathBuf>,
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value = "spectrum")]
    name: String,
    #[arg(long, value_delimiter = ',')]
    axes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    apodization: Option<Vec<f64>>,
    #[arg(long)]
    zero_pad: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    flip: Option<Vec<String>>,
    #[arg(long, value_enum)]
    scaling: Option<ScalingArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Linear,
    Arcsinh,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error("engine deviation {0:.3e} exceeds {DEVIATION_LIMIT:.0e}")]
    Deviation(f64),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Deviation(_) => 4,
        }
    }
}

impl From<ionspec::Error> for CliError {
    fn from(e: ionspec::Error) -> Self {
        match e {
            ionspec::Error::Protocol(diags) => {
                CliError::Input(diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))
            }
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn load(path: &Path, overrides: &[String]) -> CliResult<ProtocolSpec> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(parse_with_overrides(&text, overrides)?)
}

fn resolve(path: &Path, args: &RunArgs, extra: &[String]) -> CliResult<ProtocolSpec> {
    let overrides: Vec<String> = args.overrides.iter().chain(extra).cloned().collect();
    let mut spec = load(path, &overrides)?;
    if let Some(m) = &args.method {
        spec.method = m.parse()?;
    }
    if let Some(Profile::Ci) = args.profile {
        spec = spec.reduced(CI_POINTS, CI_CAP);
    }
    spec.validate()?;
    Ok(spec)
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Signal for a spec, from the cache directory when one is configured.
fn compute_signal(spec: &ProtocolSpec, hash: &str) -> CliResult<(SignalGrid, bool)> {
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    if let Some(dir) = &cache {
        let path = dir.join(hash).join("signal.csv");
        if path.exists() {
            match SignalGrid::read(&path) {
                Ok(s) => {
                    info!("cache hit {}", path.display());
                    return Ok((s, true));
                }
                Err(e) => warn!("ignoring unreadable cache entry {}: {e}", path.display()),
            }
        }
    }
    let prepared = spec.prepare()?;
    let mut signal = prepared.run()?.signal;
    if let Some(t) = &spec.transform {
        signal.metadata.insert("protocol_transform".into(), serde_json::to_value(t)?);
    }
    signal.metadata.insert("protocol_hash".into(), json!(hash));
    if let Some(dir) = &cache {
        let entry = dir.join(hash);
        if let Err(e) = fs::create_dir_all(&entry).map_err(ionspec::Error::from).and_then(|_| signal.write(&entry, "signal")) {
            warn!("could not write cache entry {}: {e}", entry.display());
        }
    }
    Ok((signal, false))
}

/// Run one protocol into `out`; returns the manifest.
fn run_signal(spec: &ProtocolSpec, out: &Path, with_spectrum: bool) -> CliResult<Manifest> {
    let started = Instant::now();
    let resolved = spec.to_value();
    let hash = sha256_hex(serde_json::to_string(&resolved)?.as_bytes());
    let (signal, cached) = compute_signal(spec, &hash)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let (csv, meta) = signal.write(out, "signal")?;
    files.extend([csv, meta]);
    if with_spectrum {
        if let Some(t) = &spec.transform {
            let spectrum = t.apply(&signal, is_closed(&signal))?;
            let (csv, meta) = spectrum.write(out, "spectrum")?;
            files.extend([csv, meta]);
        }
    }
    let deviation = signal.metadata.get("engine_deviation").and_then(Value::as_f64);
    let manifest = Manifest::new(
        hash,
        resolved,
        spec.method,
        json!({
            "axes": signal.axes.iter().map(|a| json!({"name": a.name, "points": a.count, "step": a.step})).collect::<Vec<_>>(),
            "hilbert_dim": signal.metadata.get("hilbert_dim"),
            "phase_grid": signal.metadata.get("phase_grid"),
            "pathways": signal.metadata.get("pathways"),
        }),
        started.elapsed().as_secs_f64(),
        deviation,
        cached,
        unix_time(),
        &files,
    )?;
    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest)
}

fn check_deviation(m: &Manifest) -> CliResult<()> {
    match m.engine_deviation {
        Some(d) if d > DEVIATION_LIMIT => Err(CliError::Deviation(d)),
        _ => Ok(()),
    }
}

fn is_closed(signal: &SignalGrid) -> bool {
    signal.metadata.get("closed").and_then(Value::as_bool).unwrap_or(false)
}

fn cmd_spectrum(args: &SpectrumArgs) -> CliResult<()> {
    let mut signal = SignalGrid::read(&args.signal)?;
    if let Some(other) = &args.subtract {
        signal = difference_signal(&signal, &SignalGrid::read(other)?)?;
    }
    let from_protocol: Option<TransformSpec> = signal
        .metadata
        .get("protocol_transform")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()?;
    let mut t = from_protocol.unwrap_or_else(|| TransformSpec {
        axes: signal.axes.iter().map(|a| a.name.clone()).collect(),
        apodization: Vec::new(),
        zero_pad: 1,
        flip: Vec::new(),
        scaling: Scaling::Linear,
    });
    if let Some(axes) = &args.axes {
        if args.apodization.is_none() {
            t.apodization.clear();
        }
        t.axes = axes.clone();
    }
    if let Some(eta) = &args.apodization {
        t.apodization = eta.clone();
    }
    if let Some(z) = args.zero_pad {
        t.zero_pad = z;
    }
    if let Some(f) = &args.flip {
        t.flip = f.iter().filter(|s| !s.is_empty()).cloned().collect();
    }
    if let Some(s) = args.scaling {
        t.scaling = match s {
            ScalingArg::Linear => Scaling::Linear,
            ScalingArg::Arcsinh => Scaling::Arcsinh,
        };
    }
    let closed = is_closed(&signal);
    let spectrum = t.apply(&signal, closed)?;
    fs::create_dir_all(&args.out)?;
    let (csv, _) = spectrum.write(&args.out, &args.name)?;
    info!(
        "wrote {} (apodization {:?}, zero-pad {})",
        csv.display(),
        t.rates(closed),
        t.zero_pad
    );
    Ok(())
}

fn cmd_render(path: &Path, out: &Path, component: Component, xlim: Option<&[f64]>, ylim: Option<&[f64]>) -> CliResult<()> {
    let spectrum = SpectrumGrid::read(path)?;
    let svg = render::heatmap(&spectrum, component, xlim, ylim).map_err(CliError::Input)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, svg)?;
    Ok(())
}

fn sweep_dir_name(k: usize, param: &str, value: &str) -> String {
    let leaf = param.rsplit('.').next().unwrap_or(param);
    let value: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+') { c } else { '_' })
        .collect();
    format!("{k:03}_{leaf}={value}")
}

fn cmd_sweep(protocol: &Path, param: &str, values: &[String], out: &Path, args: &RunArgs) -> CliResult<()> {
    let values: Vec<&String> = values.iter().filter(|v| !v.trim().is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Input("sweep needs at least one value".into()));
    }
    let specs = values
        .iter()
        .map(|v| resolve(protocol, args, &[format!("{param}={}", v.trim())]))
        .collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    let mut worst: Option<f64> = None;
    for (k, (value, spec)) in values.iter().zip(&specs).enumerate() {
        let dir = sweep_dir_name(k, param, value);
        info!("sweep {param}={value} -> {dir}");
        let manifest = run_signal(spec, &out.join(&dir), args.spectrum)?;
        if let Some(d) = manifest.engine_deviation {
            worst = Some(worst.map_or(d, |w: f64| w.max(d)));
        }
        entries.push(json!({
            "value": serde_json::from_str::<Value>(value.trim()).unwrap_or(json!(value.trim())),
            "directory": dir,
            "protocol_hash": manifest.protocol_hash,
            "engine_deviation": manifest.engine_deviation,
        }));
    }
    let index = json!({ "parameter": param, "runs": entries });
    fs::write(out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    match worst {
        Some(d) if d > DEVIATION_LIMIT => Err(CliError::Deviation(d)),
        _ => Ok(()),
    }
}

/// Diagonalize only when the dense matrix stays small.
const MAX_DIAGONALIZE: usize = 4096;

fn cmd_model(protocol: &Path, overrides: &[String]) -> CliResult<Value> {
    let spec = load(protocol, overrides)?;
    let model = spec.model.to_model();
    let layout = model.layout()?;
    let mut report = json!({
        "kind": if model.is_phonon() { "phonon" } else { "ising" },
        "units": model.units(),
        "model": serde_json::to_value(&spec.model)?,
        "hilbert_dim": layout.dim(),
    });
    if layout.dim() <= MAX_DIAGONALIZE {
        let (energies, _) = model.hamiltonian()?.eigh()?;
        report["hamiltonian_eigenvalues"] = json!(energies.to_vec());
    }
    if let Model::Phonon(p) = &model {
        let table = exciton_table(p)?;
        let positions = if p.n_ions >= 2 { equilibrium_positions(p.n_ions)? } else { vec![0.0] };
        let (omega, hopping) = chain_couplings(p.n_ions, p.beta0)?;
        report["equilibrium_positions"] = json!(positions);
        report["local_frequencies"] = json!(omega);
        report["hopping"] = json!(hopping.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        report["excitons"] = json!({
            "single_energies": table.single_energies,
            "single_coefficients": table.single_coeffs.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "double_energies": table.double_energies,
        });
        report["baths"] = json!(p
            .baths
            .iter()
            .map(|b| json!({"site": b.site + 1, "nbar": b.nbar, "gamma": b.rate}))
            .collect::<Vec<_>>());
    }
    Ok(report)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Signal { protocol, out, run } => {
            let spec = resolve(&protocol, &run, &[])?;
            let manifest = run_signal(&spec, &out, run.spectrum)?;
            check_deviation(&manifest)
        }
        Command::Spectrum(args) => cmd_spectrum(&args),
        Command::Render {
            spectrum,
            out,
            component,
            xlim,
            ylim,
        } => cmd_render(&spectrum, &out, component, xlim.as_deref(), ylim.as_deref()),
        Command::Sweep {
            protocol,
            param,
            values,
            out,
            run,
        } => cmd_sweep(&protocol, &param, &values, &out, &run),
        Command::Model { protocol, overrides } => {
            let report = cmd_model(&protocol, &overrides)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
