use std::path::Path;
use std::process::{Command, Output};

use psic::phantom::PhantomSpec;
use psic::pipeline::PipelineConfig;

fn psic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psic"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = psic(args);
    assert!(out.status.success(), "psic {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_spec(dir: &Path) -> std::path::PathBuf {
    let mut spec = PhantomSpec::scenario_a();
    spec.n_per_class = 4;
    spec.dims = [6, 6, 6];
    spec.rois[0].lo = [1, 1, 1];
    spec.rois[0].hi = [5, 5, 5];
    spec.k = 15;
    let path = dir.join("spec.json");
    std::fs::write(&path, serde_json::to_vec(&spec).unwrap()).unwrap();
    path
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = PipelineConfig {
        network: psic::dcnn::NetworkConfig::with_degree(2),
        folds: 2,
        ..Default::default()
    };
    cfg.training.epochs = 2;
    cfg.training.batch_size = 16;
    cfg.training.split_mode = psic::training::SplitMode::BySubject;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = tiny_spec(d);
    let config = tiny_config(d);
    let cohort = d.join("cohort");
    ok(&["gen-phantom", "--spec", p(&spec), "--out", p(&cohort), "--seed", "4"]);
    let manifest = cohort.join("manifest.json");
    assert!(manifest.exists());
    let vol = cohort.join("cn01.dcb");
    let mask = cohort.join("cn01_wm.dcb");

    ok(&["fit-sh", "--in", p(&vol), "--mask", p(&mask), "--nmax", "4", "--out", p(&d.join("sh"))]);
    let sh = psic::io::DcbContainer::read(&d.join("sh/sh.dcb")).unwrap();
    assert_eq!(sh.channels(), 15);
    let centers = std::fs::read_to_string(d.join("sh/centers.csv")).unwrap();
    assert_eq!(centers.lines().count(), 1 + 8);

    ok(&["metrics", "--in", p(&vol), "--mask", p(&mask), "--out", p(&d.join("m.csv"))]);
    assert_eq!(std::fs::read_to_string(d.join("m.csv")).unwrap().lines().count(), 65);

    let model = d.join("model.psm");
    ok(&["train", "--manifest", p(&manifest), "--roi", "wm", "--config", p(&config), "--out", p(&model)]);
    assert!(psic::io::ModelFile::read(&model).is_ok());
    assert_eq!(std::fs::read_to_string(d.join("model_history.csv")).unwrap().lines().count(), 3);

    let map = d.join("psic.dcb");
    ok(&["predict", "--model", p(&model), "--in", p(&vol), "--mask", p(&mask), "--out", p(&map)]);
    assert_eq!(psic::io::DcbContainer::read(&map).unwrap().channels(), 1);
    assert!(d.join("psic_z002.pgm").exists());

    let report = d.join("report.csv");
    let psic_dir = d.join("maps");
    let args = |threads: &'static str, out: &Path| {
        vec![
            "evaluate".to_string(),
            "--manifest".into(),
            p(&manifest).into(),
            "--config".into(),
            p(&config).into(),
            "--threads".into(),
            threads.into(),
            "--out".into(),
            p(out).into(),
        ]
    };
    let mut first = args("1", &report);
    first.extend(["--psic-dir".to_string(), p(&psic_dir).to_string()]);
    ok(&first.iter().map(String::as_str).collect::<Vec<_>>());
    let csv = std::fs::read_to_string(&report).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 12);
    assert_eq!(&header[2..], ["MD", "FA", "CL", "CP", "DV", "ASD", "DE", "CVD", "LR", "DNN"]);
    assert!(d.join("report.json").exists());
    assert!(psic_dir.join("wm/ad03.dcb").exists());

    let report8 = d.join("report8.csv");
    ok(&args("8", &report8).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&report8).unwrap());
    assert_eq!(std::fs::read(d.join("report.json")).unwrap(), std::fs::read(d.join("report8.json")).unwrap());
}

#[test]
fn missing_input_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = psic(&["metrics", "--in", p(&d.join("nope.dcb")), "--mask", p(&d.join("nope_m.dcb")), "--out", p(&d.join("m.csv"))]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let out = psic(&["evaluate", "--manifest", p(&d.join("missing.json")), "--out", p(&d.join("r.csv"))]);
    assert!(!out.status.success());
    let out = psic(&["gen-phantom", "--spec", p(&d.join("missing.json")), "--out", p(&d.join("cohort"))]);
    assert!(!out.status.success());
    assert_eq!(std::fs::read_dir(d).unwrap().count(), 0);
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!psic(&[]).status.success());
    assert!(!psic(&["train", "--roi", "wm"]).status.success());
    assert!(!psic(&["evaluate", "--manifest", "m.json", "--out", "r.csv", "--threads", "0"]).status.success());
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let read = |name: &str| std::fs::read(root.join(name)).unwrap();
    for (name, preset) in [
        ("scenario_a.json", PhantomSpec::scenario_a()),
        ("scenario_b.json", PhantomSpec::scenario_b()),
        ("null.json", PhantomSpec::null()),
    ] {
        let spec: PhantomSpec = serde_json::from_slice(&read(name)).unwrap();
        assert_eq!(serde_json::to_value(&spec).unwrap(), serde_json::to_value(&preset).unwrap(), "{name}");
    }
    let cfg: PipelineConfig = serde_json::from_slice(&read("pipeline.json")).unwrap();
    cfg.validate().unwrap();
    assert_eq!((cfg.training.epochs, cfg.training.batch_size), (30, 64));
}
