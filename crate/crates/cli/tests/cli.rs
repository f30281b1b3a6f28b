use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ionspec"))
}

fn protocol(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../protocols")
        .join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).env_remove("IONSPEC_CACHE_DIR").output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_sqc(dir: &Path) -> PathBuf {
    let path = dir.join("sqc.json");
    let mut doc = json(&protocol("sqc"));
    doc["model"]["n_spins"] = 3.into();
    doc["delays"]["t1"]["points"] = 16.into();
    doc["delays"]["t2"]["points"] = 8.into();
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

#[test]
fn signal_writes_grid_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_sqc(dir.path());
    let out = dir.path().join("out");
    let o = run(&["signal", p.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["signal.csv", "signal.meta.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest = json(&out.join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);
    for f in files {
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
    }
    assert_eq!(manifest["parameters"]["model"]["n_spins"], 3);
    let csv = fs::read_to_string(out.join("signal.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16 * 8);
}

#[test]
fn overrides_and_both_method_report_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_sqc(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "signal",
        p.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--set",
        "model.B=0.1",
        "--set",
        "delays.t1.points=8",
        "--method",
        "both",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["parameters"]["model"]["B"], 0.1);
    assert_eq!(manifest["grid"]["axes"][0]["points"], 8);
    assert!(manifest["engine_deviation"].as_f64().unwrap() < 1e-10);
}

#[test]
fn identical_runs_give_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_sqc(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(run(&["signal", p.to_str().unwrap(), "-o", out.to_str().unwrap()]).status.success());
    }
    assert_eq!(
        fs::read(a.join("signal.csv")).unwrap(),
        fs::read(b.join("signal.csv")).unwrap()
    );
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    assert_eq!(ma["files"], mb["files"]);
    assert_eq!(ma["protocol_hash"], mb["protocol_hash"]);
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"units\": ").unwrap();
    let o = run(&["signal", bad.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("syntax"));

    let p = small_sqc(dir.path());
    let o = run(&["signal", p.to_str().unwrap(), "--set", "signature.0=2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["signal", "/nonexistent/protocol.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn spectrum_applies_closed_default_and_rejects_spectra() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_sqc(dir.path());
    let out = dir.path().join("out");
    assert!(run(&["signal", p.to_str().unwrap(), "-o", out.to_str().unwrap()]).status.success());
    let sig = out.join("signal.csv");
    let o = run(&[
        "spectrum",
        sig.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--flip",
        "",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let meta = json(&out.join("spectrum.meta.json"));
    assert_eq!(meta["metadata"]["transform"]["apodization"], serde_json::json!([0.25, 0.25]));

    let o = run(&[
        "spectrum",
        sig.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--name",
        "plain",
        "--axes",
        "t1",
        "--flip",
        "",
    ]);
    assert!(o.status.success());
    let meta = json(&out.join("plain.meta.json"));
    assert_eq!(meta["metadata"]["transform"]["apodization"], serde_json::json!([0.01]));

    let spec = out.join("spectrum.csv");
    let o = run(&["spectrum", spec.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn subtracting_a_signal_from_itself_gives_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_sqc(dir.path());
    let out = dir.path().join("out");
    assert!(run(&["signal", p.to_str().unwrap(), "-o", out.to_str().unwrap()]).status.success());
    let sig = out.join("signal.csv");
    let o = run(&[
        "spectrum",
        sig.to_str().unwrap(),
        "--subtract",
        sig.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--name",
        "diff",
    ]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("diff.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[cols.len() - 2], 0.0);
        assert_eq!(cols[cols.len() - 1], 0.0);
    }
}

#[test]
fn render_draws_heatmap_with_colorbar() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_sqc(dir.path());
    let out = dir.path().join("out");
    assert!(run(&["signal", p.to_str().unwrap(), "-o", out.to_str().unwrap(), "--spectrum"]).status.success());
    let svg = dir.path().join("s.svg");
    let o = run(&[
        "render",
        out.join("spectrum.csv").to_str().unwrap(),
        "-o",
        svg.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert!(text.contains("colorbar"));
    assert!(text.contains("w1 [J0]"));
    assert_eq!(text.matches("<rect").count(), 16 * 8 + 1 + 1 + 64 + 1);

    let sig = out.join("signal.csv");
    assert!(run(&["spectrum", sig.to_str().unwrap(), "-o", out.to_str().unwrap(), "--name", "one", "--axes", "t1"])
        .status
        .success());
    let o = run(&["render", out.join("one.csv").to_str().unwrap(), "-o", svg.to_str().unwrap()]);
    assert!(o.status.success(), "2-axis grid with one transformed axis renders");
}

#[test]
fn sweep_creates_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_sqc(dir.path());
    let out = dir.path().join("sweep");
    let o = run(&[
        "sweep",
        p.to_str().unwrap(),
        "--param",
        "model.B",
        "--values",
        "0.1,1,10",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let index = json(&out.join("index.json"));
    let runs = index["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for r in runs {
        let sub = out.join(r["directory"].as_str().unwrap());
        assert!(sub.join("signal.csv").exists());
        assert!(sub.join("manifest.json").exists());
    }
    assert_eq!(runs[2]["value"], 10);

    let o = run(&["sweep", p.to_str().unwrap(), "--param", "model.B", "--values", "", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sweep", p.to_str().unwrap(), "--param", "model.B", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn model_dumps_exciton_table() {
    let o = run(&["model", protocol("pe").to_str().unwrap(), "--set", "model.U=0"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let e: Vec<f64> = serde_json::from_value(v["excitons"]["single_energies"].clone()).unwrap();
    for (a, b) in e.iter().zip([0.88, 0.95, 1.0]) {
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(v["baths"].as_array().unwrap().len(), 3);

    let o = run(&["model", protocol("pe").to_str().unwrap(), "--set", "model.n_ions=2", "--set", "model.baths=[]"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let u: Vec<f64> = serde_json::from_value(v["equilibrium_positions"].clone()).unwrap();
    assert!((u[1] - 0.62996).abs() < 1e-5 && (u[0] + 0.62996).abs() < 1e-5);

    let o = run(&[
        "model",
        protocol("sqc").to_str().unwrap(),
        "--set",
        "model.n_spins=1",
        "--set",
        "model.B=0.7",
    ]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let ev: Vec<f64> = serde_json::from_value(v["hamiltonian_eigenvalues"].clone()).unwrap();
    assert!((ev[0] + 0.7).abs() < 1e-12 && (ev[1] - 0.7).abs() < 1e-12);
}

#[test]
fn cache_dir_reuses_signals() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let p = small_sqc(dir.path());
    let go = |out: &str| {
        bin()
            .args(["signal", p.to_str().unwrap(), "-o", dir.path().join(out).to_str().unwrap()])
            .env("IONSPEC_CACHE_DIR", &cache)
            .output()
            .unwrap()
    };
    assert!(go("a").status.success());
    assert!(go("b").status.success());
    assert_eq!(json(&dir.path().join("a/manifest.json"))["cached"], false);
    assert_eq!(json(&dir.path().join("b/manifest.json"))["cached"], true);
    assert_eq!(
        fs::read(dir.path().join("a/signal.csv")).unwrap(),
        fs::read(dir.path().join("b/signal.csv")).unwrap()
    );
}

#[test]
fn every_shipped_protocol_runs_in_ci_profile() {
    let dir = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../protocols");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        if path.extension().is_none_or(|e| e != "json") || name.ends_with(".schema") {
            continue;
        }
        let out = dir.path().join(&name);
        let o = run(&[
            "signal",
            path.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
            "--profile",
            "ci",
            "--method",
            "both",
            "--spectrum",
        ]);
        assert_eq!(o.status.code(), Some(0), "{name}");
        n += 1;
    }
    assert!(n >= 12);
}
