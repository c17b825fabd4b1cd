use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use virus_field_cli::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use virus_field_cli::commands::{self, AblationMatrix, EvaluateOptions, TrainOptions, CHECKPOINT_FILE};
use virus_field_cli::config::{parse_value, RunConfig};

fn tiny(out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut o: Vec<(String, toml::Value)> = [
        ("train.steps", "8"),
        ("train.batch_size", "64"),
        ("train.eval_test_poses", "2"),
        ("train.psnr_images", "1"),
        ("train.scan_step_deg", "10"),
        ("train.grid_resolution", "32"),
        ("train.nerf_update_samples", "256"),
        ("train.depth_sweep_every", "4"),
        ("checkpoint_every", "0"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), parse_value(v)))
    .collect();
    o.push(("out".into(), toml::Value::String(out.to_string_lossy().into())));
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), parse_value(v))));
    RunConfig::resolve(None, &o).unwrap()
}

fn quiet() -> TrainOptions {
    TrainOptions { quiet: true, ..Default::default() }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_virus-field"));
    c.env_remove("VIRUS_FIELD_THREADS");
    c
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    commands::train(&cfg, None, &quiet()).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);

    // restoring into a trainer and capturing again loses nothing
    let ds = Arc::new(ck.config.load_dataset().unwrap());
    let t = ck.restore(ds).unwrap();
    let again = Checkpoint::capture(&ck.config_text, &ck.config, &t);
    assert_eq!(again.field, ck.field);
    assert_eq!(again.optim, ck.optim);
    assert_eq!(again.grid, ck.grid);
    assert_eq!(again.step, 8);
}

#[test]
fn checkpoint_rejects_other_versions_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[("train.steps", "2")]);
    commands::train(&cfg, None, &quiet()).unwrap();
    let bytes = std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();

    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&v).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let mut t = bytes.clone();
    t.push(0);
    assert!(Checkpoint::from_bytes(&t).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut m = bytes;
    m[0] = b'X';
    assert!(Checkpoint::from_bytes(&m).is_err());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (straight, _) = commands::train(&tiny(a.path(), &[]), None, &quiet()).unwrap();

    let cfg = tiny(b.path(), &[]);
    let (half, s) = commands::train(&cfg, None, &TrainOptions { stop_after: Some(3), ..quiet() }).unwrap();
    assert_eq!(half.step, 3);
    assert!(!s.finished);
    let ck = Checkpoint::load(&b.path().join(CHECKPOINT_FILE)).unwrap();
    let (resumed, s) = commands::train(&ck.config, Some(&ck), &quiet()).unwrap();
    assert!(s.finished);

    assert_eq!(resumed.step, straight.step);
    assert_eq!(resumed.field, straight.field);
    assert_eq!(resumed.optim, straight.optim);
    assert_eq!(resumed.grid, straight.grid);
    assert_eq!(resumed.projection, straight.projection);
}

#[test]
fn run_directory_holds_config_metrics_and_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[("train.eval_every", "4")]);
    let (_, summary) = commands::train(&cfg, None, &TrainOptions { svg: true, ..quiet() }).unwrap();
    for f in ["config.toml", "checkpoint.vnck", "timeline.csv", "timeline.svg", "metrics.csv", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let echoed = RunConfig::resolve(Some(&dir.path().join("config.toml")), &[]).unwrap();
    assert_eq!(echoed, cfg);
    let timeline = std::fs::read_to_string(dir.path().join("timeline.csv")).unwrap();
    assert_eq!(timeline.lines().count(), 1 + 2, "{timeline}");
    assert!(summary.zone3.is_some());
}

#[test]
fn untrained_field_has_almost_no_inliers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[("train.steps", "1")]);
    commands::train(&cfg, None, &quiet()).unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let out = dir.path().join("eval");
    let res = commands::evaluate(&ck, &EvaluateOptions { dataset: None, test_poses: Some(3), out: out.clone() }).unwrap();
    let z = res.report.metrics.zone3_summary();
    assert!(z[1] < 20.0, "accuracy inliers {}%", z[1]);
    assert!(out.join("baselines.csv").is_file() && out.join("metrics.json").is_file());
    assert!(std::fs::read_dir(out.join("scans")).unwrap().count() >= 2);

    // zone 3 is beyond the IRS range; the LiDAR covers it densely
    let cov = |name: &str| res.baselines.iter().find(|(k, _)| k.name() == name).unwrap().1.zone3_summary()[2];
    assert!(cov("IRS").is_nan());
    assert!(cov("LiDAR") < 0.1, "lidar {}", cov("LiDAR"));
    assert!(!(cov("USS") < cov("LiDAR")), "uss {} lidar {}", cov("USS"), cov("LiDAR"));
}

#[test]
fn two_arm_ablation_reports_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = AblationMatrix { base: tiny(dir.path(), &[("train.steps", "3")]), seeds: vec![0, 1], ..Default::default() };
    m.arms = vec!["cam+uss+irs".parse().unwrap(), "cam".parse().unwrap()];
    let report = commands::ablate(&m, Some(dir.path()), false).unwrap();
    assert_eq!(report.arms.len(), 2);
    assert!(report.arms.iter().all(|a| a.per_seed.len() == 2));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    // per-seed rows plus a median row per arm
    assert_eq!(csv.lines().count(), 1 + 2 * 3, "{csv}");
    assert!(dir.path().join("matrix.toml").is_file());
}

fn files(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    commands::generate(&cfg, &dir.path().join("a")).unwrap();
    commands::generate(&cfg, &dir.path().join("b")).unwrap();
    let (a, b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert!(a.len() > 3);
    assert_eq!(a, b);

    let other = RunConfig { seed: 1, ..cfg };
    commands::generate(&other, &dir.path().join("c")).unwrap();
    assert_ne!(files(&dir.path().join("c")), a);
}

#[test]
fn bad_arguments_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["train", "--scene", "atrium", "--out", out],
        vec!["train", "--sensors", "cam+sonar", "--out", out],
        vec!["train", "--set", "train.nonsense=3", "--out", out],
        vec!["train", "--steps", "0", "--out", out],
        vec!["train", "--threads", "0", "--out", out],
        vec!["frobnicate"],
    ] {
        let st = bin().args(&args).output().unwrap();
        assert_eq!(st.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&st.stderr));
    }
}

#[test]
fn runtime_failures_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("missing.vnck");
    let st = bin().args(["evaluate", "--checkpoint", bogus.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));

    let garbage = dir.path().join("garbage.vnck");
    std::fs::write(&garbage, b"VNCK\x63\0\0\0").unwrap();
    let st = bin().args(["render-scan", "--checkpoint", garbage.to_str().unwrap(), "--frame", "0"]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("version"));
}

#[test]
fn render_scan_prints_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[("train.steps", "2")]);
    commands::train(&cfg, None, &quiet()).unwrap();
    let ck = dir.path().join(CHECKPOINT_FILE);
    let st = bin().args(["--threads", "1", "render-scan", "--checkpoint", ck.to_str().unwrap(), "--frame", "3", "--step-deg", "30"]).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let text = String::from_utf8(st.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("azimuth_deg,depth_m,valid"));
    assert_eq!(text.lines().count(), 1 + 12);
}
