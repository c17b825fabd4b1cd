//! The work behind each subcommand, callable without the argument parser.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use virus_field::eval::{ablation_report, compare_points, sensor_baseline_points, zone_metrics, AblationReport, ArmResult, BaselineSensor, ScanComparison, ScanMetrics, INLIER_THRESHOLD};
use virus_field::render::{render_scan, DepthScan};
use virus_field::simrig::Dataset;
use virus_field::train::{timeline_csv, EvalReport, Evaluator, GridVariant, SensorSet, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::{config_hash, RunConfig};
use crate::error::{usage, CliError, Result};
use crate::svg::{line_chart, Series};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.vnck";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

/// Simulates the configured scene into `out` and echoes the config there.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    if cfg.dataset.is_some() {
        return usage("generate simulates a scene; drop the dataset path");
    }
    let ds = cfg.load_dataset()?;
    ds.write(out)?;
    write(&out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(ds)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop (with a checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
    pub svg: bool,
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub config_hash: String,
    pub steps: u64,
    pub finished: bool,
    pub steps_per_sec: f64,
    pub train_seconds: f64,
    pub psnr: Option<f64>,
    /// Accuracy mean, accuracy inlier %, coverage mean, coverage inlier %.
    pub zone3: Option<[f64; 4]>,
    pub stats: virus_field::train::TrainStats,
}

/// Trains from scratch or from `resume`, writing the resolved config,
/// checkpoints, the metrics timeline and the final metrics into `cfg.out`.
pub fn train(cfg: &RunConfig, resume: Option<&Checkpoint>, opts: &TrainOptions) -> Result<(Trainer, TrainSummary)> {
    let out = &cfg.out;
    create_dir(out)?;
    let text = cfg.to_toml()?;
    write(&out.join(CONFIG_FILE), &text)?;
    let dataset = Arc::new(cfg.load_dataset()?);
    let mut trainer = match resume {
        Some(c) => c.restore(dataset)?,
        None => Trainer::new(cfg.train.clone(), dataset)?,
    };
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let save = |t: &Trainer| Checkpoint::capture(&text, cfg, t).save(&ckpt_path);
    let stop = opts.stop_after.unwrap_or(u64::MAX);
    while !trainer.finished() && trainer.step < stop {
        let rows = trainer.timeline.len();
        trainer.advance()?;
        if !opts.quiet && trainer.timeline.len() > rows {
            let r = &trainer.timeline[rows];
            let z = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.3}"));
            eprintln!(
                "step {:>6}  L_tot {:.5}  psnr {}  zone-3 acc {} cov {}  {:.2} steps/s",
                r.step,
                r.l_tot,
                z(r.psnr),
                z(r.nnd_acc_zone3),
                z(r.nnd_cov_zone3),
                r.steps_per_sec
            );
        }
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    write(&out.join("timeline.csv"), timeline_csv(&trainer.timeline))?;
    if opts.svg {
        write(&out.join("timeline.svg"), timeline_svg(&trainer))?;
    }
    let finished = trainer.finished();
    if finished {
        if let Some(ev) = &trainer.last_eval {
            write(&out.join("metrics.csv"), ev.metrics.to_csv())?;
        }
    }
    let summary = TrainSummary {
        seed: cfg.seed,
        config_hash: format!("{:016x}", config_hash(&text)),
        steps: trainer.step,
        finished,
        steps_per_sec: trainer.steps_per_sec(),
        train_seconds: trainer.train_seconds,
        psnr: trainer.last_eval.as_ref().and_then(|e| e.psnr),
        zone3: trainer.last_eval.as_ref().map(|e| e.metrics.zone3_summary()),
        stats: trainer.stats.clone(),
    };
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((trainer, summary))
}

fn timeline_svg(t: &Trainer) -> String {
    let pick = |f: fn(&virus_field::train::TimelineRow) -> Option<f64>| t.timeline.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect();
    line_chart(
        "training timeline",
        "step",
        &[
            Series { name: "L_tot", points: pick(|r| Some(r.l_tot)) },
            Series { name: "zone-3 accuracy NND [m]", points: pick(|r| r.nnd_acc_zone3) },
            Series { name: "zone-3 coverage NND [m]", points: pick(|r| r.nnd_cov_zone3) },
        ],
    )
}

#[derive(Clone, Debug)]
pub struct EvaluateOptions {
    /// Overrides the dataset recorded in the checkpoint's config.
    pub dataset: Option<PathBuf>,
    pub test_poses: Option<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub baselines: Vec<(BaselineSensor, ScanMetrics)>,
    pub skipped: Vec<usize>,
}

/// Renders scans at the test poses, scores them and the raw sensor
/// baselines, and writes CSV/JSON results plus every scan.
pub fn evaluate(ckpt: &Checkpoint, opts: &EvaluateOptions) -> Result<EvaluateOutcome> {
    let mut cfg = ckpt.config.clone();
    if let Some(d) = &opts.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(n) = opts.test_poses {
        if n == 0 {
            return usage("at least one test pose is needed");
        }
        cfg.train.eval_test_poses = n;
    }
    let ds = Arc::new(cfg.load_dataset()?);
    let mut restored = ckpt.clone();
    restored.config = cfg.clone();
    let mut trainer = restored.restore(ds.clone())?;

    let ev = Evaluator::new(&ds, cfg.train.eval_test_poses, cfg.train.scan_step_deg)?;
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for (&f, gt) in ev.frames.iter().zip(&ev.ground_truth) {
        // a pose with no map return around it lies outside the mapped area
        if gt.depths.iter().all(Option::is_none) {
            eprintln!("warning: test pose at frame {f} sees no mapped surface, skipped");
            skipped.push(f);
        } else {
            frames.push(f);
        }
    }
    if frames.is_empty() {
        return Err(CliError::Checkpoint("no usable test pose".into()));
    }
    let report = trainer.evaluate_frames(&frames)?;

    let rig = &ds.meta.rig;
    let mut baselines = Vec::new();
    for kind in [BaselineSensor::Lidar, BaselineSensor::Irs, BaselineSensor::Uss] {
        let mut pooled = ScanComparison::default();
        for (&f, gt) in frames.iter().zip(&report.ground_truth) {
            pooled.extend(compare_points(&sensor_baseline_points(&ds.frames[f], rig, kind), gt));
        }
        baselines.push((kind, zone_metrics(&pooled, INLIER_THRESHOLD)));
    }

    let out = &opts.out;
    create_dir(&out.join("scans"))?;
    write(&out.join(CONFIG_FILE), cfg.to_toml()?)?;
    write(&out.join("metrics.csv"), report.metrics.to_csv())?;
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&report.metrics)?)?;
    let mut csv = String::new();
    for (k, (kind, m)) in baselines.iter().enumerate() {
        for (i, line) in m.to_csv().lines().enumerate() {
            if i == 0 && k == 0 {
                csv.push_str(&format!("sensor,{line}\n"));
            } else if i > 0 {
                csv.push_str(&format!("{},{line}\n", kind.name()));
            }
        }
    }
    write(&out.join("baselines.csv"), csv)?;
    for (k, &f) in frames.iter().enumerate() {
        report.predicted[k].write_csv(&out.join(format!("scans/frame_{f:04}_pred.csv")))?;
        report.ground_truth[k].write_csv(&out.join(format!("scans/frame_{f:04}_gt.csv")))?;
    }
    Ok(EvaluateOutcome { report, baselines, skipped })
}

/// A 360 degree depth scan rendered from the field at a dataset frame.
pub fn render_scan_at(ckpt: &Checkpoint, frame: usize, step_deg: f64, dataset: Option<PathBuf>) -> Result<DepthScan> {
    let mut restored = ckpt.clone();
    if dataset.is_some() {
        restored.config.dataset = dataset;
    }
    let ds = Arc::new(restored.config.load_dataset()?);
    if frame >= ds.frames.len() {
        return usage(format!("frame {frame} out of range (dataset has {} frames)", ds.frames.len()));
    }
    let trainer = restored.restore(ds.clone())?;
    let center = virus_field::eval::scan_center(ds.frames[frame].pose, &ds.meta.rig);
    Ok(render_scan(&trainer.field, &trainer.grid, trainer.sampler().scene_frame(), center, step_deg, &trainer.config.render)?)
}

/// Arms are every sensor set crossed with every grid variant and pose
/// source, all trained on the same seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMatrix {
    pub base: RunConfig,
    pub arms: Vec<SensorSet>,
    pub grids: Vec<GridVariant>,
    pub noisy_poses: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        let arms = ["cam+uss+irs", "cam+uss", "cam+irs", "cam", "cam+rgbd"].iter().map(|s| s.parse().expect("valid sensor set")).collect();
        Self { base: RunConfig::default(), arms, grids: vec![GridVariant::Virus], noisy_poses: vec![false], seeds: (0..5).collect() }
    }
}

impl AblationMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.grids.is_empty() || self.noisy_poses.is_empty() || self.seeds.is_empty() {
            return usage("ablation matrix needs at least one arm, grid, pose source and seed");
        }
        if self.arms.len() * self.grids.len() * self.noisy_poses.len() < 2 {
            return usage("ablation matrix needs at least two arms");
        }
        let mut base = self.base.clone();
        for &noisy in &self.noisy_poses {
            base.pose_noise = noisy;
            base.train.noisy_poses = noisy;
            base.validate()?;
        }
        Ok(())
    }

    pub fn arm_name(&self, sensors: SensorSet, grid: GridVariant, noisy: bool) -> String {
        let mut name = sensors.to_string();
        if self.grids.len() > 1 {
            name.push_str(&format!("@{grid}"));
        }
        if self.noisy_poses.len() > 1 && noisy {
            name.push_str("/noisy-pose");
        }
        name
    }
}

/// Runs every arm on every seed. Datasets are simulated once per seed and
/// pose source and shared by the arms.
pub fn ablate(m: &AblationMatrix, out: Option<&Path>, progress: bool) -> Result<AblationReport> {
    m.validate()?;
    let combos: Vec<(SensorSet, GridVariant, bool)> = m
        .noisy_poses
        .iter()
        .flat_map(|&n| m.grids.iter().flat_map(move |&g| m.arms.iter().map(move |&a| (a, g, n))))
        .collect();
    let mut arms: Vec<ArmResult> = combos
        .iter()
        .map(|&(a, g, n)| ArmResult { name: m.arm_name(a, g, n), per_seed: Vec::new(), steps_per_sec: Vec::new() })
        .collect();
    for &seed in &m.seeds {
        for &noisy in &m.noisy_poses {
            let mut cfg = m.base.clone();
            cfg.seed = seed;
            cfg.train.seed = seed;
            cfg.pose_noise = noisy;
            let ds = Arc::new(cfg.load_dataset()?);
            for (k, &(sensors, grid, n)) in combos.iter().enumerate() {
                if n != noisy {
                    continue;
                }
                let mut tc = cfg.train.clone();
                tc.sensors = sensors;
                tc.grid = grid;
                tc.noisy_poses = noisy;
                let mut t = Trainer::new(tc, ds.clone())?;
                while !t.finished() {
                    t.step()?;
                }
                let metrics = t.evaluate()?.metrics;
                let z = metrics.zone3_summary();
                if progress {
                    eprintln!(
                        "seed {seed} {:<24} acc {:.3} m  cov {:.3} m  {:.2} steps/s",
                        arms[k].name,
                        z[0],
                        z[2],
                        t.steps_per_sec()
                    );
                }
                arms[k].per_seed.push(z);
                arms[k].steps_per_sec.push(t.steps_per_sec());
            }
        }
    }
    let report = ablation_report(arms)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("matrix.toml"), toml::to_string(m).map_err(|e| CliError::Toml(e.to_string()))?)?;
        write(&dir.join("ablation.csv"), report.to_csv())?;
        write(&dir.join("ablation.txt"), report.to_text())?;
        write(&dir.join("ablation.json"), report.to_json()?)?;
    }
    Ok(report)
}
