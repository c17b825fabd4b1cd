use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;
use virus_field_cli::checkpoint::Checkpoint;
use virus_field_cli::commands::{self, AblationMatrix, EvaluateOptions, TrainOptions};
use virus_field_cli::config::{parse_value, RunConfig};
use virus_field_cli::error::{usage, CliError, Result};
use virus_field_cli::{init_threads, THREADS_ENV};

#[derive(Parser)]
#[command(name = "virus-field", version, about = "Radiance field mapping from camera, ultrasonic and infrared sensors")]
struct Cli {
    /// Worker threads; 1 makes every command fully deterministic.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene and write the dataset directory.
    Generate(GenerateArgs),
    /// Train a field; writes config, checkpoints, timeline and metrics.
    Train(TrainArgs),
    /// Score a checkpoint at the test poses against ground truth and raw sensors.
    Evaluate(EvaluateArgs),
    /// Train a matrix of sensor/grid arms over shared seeds and compare them.
    Ablate(AblateArgs),
    /// Render a 360 degree depth scan from a checkpoint.
    RenderScan(RenderScanArgs),
}

/// Flags shared by commands that resolve a run config.
#[derive(Args, Default)]
struct RunFlags {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene preset (mini-office, mini-commons) or environment JSON.
    #[arg(long)]
    scene: Option<String>,
    /// Trajectory preset (loop, line) or JSON pose list.
    #[arg(long)]
    trajectory: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Arbitrary `dotted.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunFlags {
    fn overrides(&self, prefix: &str) -> Result<Vec<(String, Value)>> {
        let mut o = Vec::new();
        if let Some(s) = &self.scene {
            o.push((format!("{prefix}scene"), Value::String(s.clone())));
        }
        if let Some(t) = &self.trajectory {
            o.push((format!("{prefix}trajectory"), Value::String(t.clone())));
        }
        if let Some(s) = self.seed {
            o.push((format!("{prefix}seed"), int(s)?));
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return usage(format!("--set expects KEY=VALUE, got '{kv}'"));
            };
            o.push((k.trim().to_string(), parse_value(v.trim())));
        }
        Ok(o)
    }

    fn is_empty(&self) -> bool {
        self.config.is_none() && self.scene.is_none() && self.trajectory.is_none() && self.seed.is_none() && self.set.is_empty()
    }
}

fn int(v: u64) -> Result<Value> {
    i64::try_from(v).map(Value::Integer).map_err(|_| CliError::Usage(format!("{v} is too large")))
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Dataset directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Use a generated dataset instead of simulating one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<u64>,
    /// Supervision, e.g. `cam+uss+irs`, `cam`, `cam+rgbd`.
    #[arg(long)]
    sensors: Option<String>,
    /// virus, instantngp-style or disabled.
    #[arg(long)]
    grid: Option<String>,
    /// offline or online.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint with its stored config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps, leaving a checkpoint.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Also write timeline.svg.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    quiet: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut o = Vec::new();
        let s = |v: &str| Value::String(v.into());
        if let Some(d) = &self.dataset {
            o.push(("dataset".into(), s(&d.to_string_lossy())));
        }
        if let Some(v) = self.steps {
            o.push(("train.steps".into(), int(v)?));
        }
        if let Some(v) = self.batch_size {
            o.push(("train.batch_size".into(), int(v)?));
        }
        if let Some(v) = &self.sensors {
            o.push(("train.sensors".into(), s(v)));
        }
        if let Some(v) = &self.grid {
            o.push(("train.grid".into(), s(v)));
        }
        if let Some(v) = &self.mode {
            o.push(("train.mode".into(), s(v)));
        }
        if let Some(v) = self.eval_every {
            o.push(("train.eval_every".into(), int(v)?));
        }
        if let Some(v) = self.checkpoint_every {
            o.push(("checkpoint_every".into(), int(v)?));
        }
        if let Some(v) = &self.out {
            o.push(("out".into(), s(&v.to_string_lossy())));
        }
        // generic --set entries go last so they win
        let mut run = self.run.overrides("")?;
        let split = run.len() - self.run.set.len();
        let sets = run.split_off(split);
        run.extend(o);
        run.extend(sets);
        Ok(run)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    test_poses: Option<usize>,
    /// Directory for metrics, baselines and scans.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// TOML ablation matrix (`base`, `arms`, `grids`, `noisy_poses`, `seeds`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sensor-set arm, repeatable; replaces the matrix arms.
    #[arg(long = "arm")]
    arms: Vec<String>,
    /// Grid variant, repeatable; replaces the matrix grids.
    #[arg(long = "grid")]
    grids: Vec<String>,
    /// Use seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    scene: Option<String>,
    /// `dotted.key=value` override on the matrix, e.g. `base.train.batch_size=512`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderScanArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset frame whose pose is the scan center.
    #[arg(long)]
    frame: usize,
    #[arg(long, default_value_t = 1.0)]
    step_deg: f64,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// CSV output (azimuth, depth); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Generate(a) => {
            let cfg = RunConfig::resolve(a.run.config.as_deref(), &a.run.overrides("")?)?;
            let ds = commands::generate(&cfg, &a.out)?;
            println!(
                "{}: {} frames, IRS validity {:.1}%, written to {}",
                ds.meta.scene,
                ds.frames.len(),
                100.0 * ds.irs_validity(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let opts = TrainOptions { stop_after: a.stop_after, svg: a.svg, quiet: a.quiet };
            let (cfg, ckpt) = match &a.resume {
                Some(path) => {
                    if !a.run.is_empty() || !a.overrides()?.is_empty() {
                        return usage("--resume continues with the stored config; drop the other config flags");
                    }
                    let c = Checkpoint::load(path)?;
                    (c.config.clone(), Some(c))
                }
                None => (RunConfig::resolve(a.run.config.as_deref(), &a.overrides()?)?, None),
            };
            let (_, summary) = commands::train(&cfg, ckpt.as_ref(), &opts)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Evaluate(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let outcome = commands::evaluate(&ckpt, &EvaluateOptions { dataset: a.dataset, test_poses: a.test_poses, out: a.out.clone() })?;
            let z = outcome.report.metrics.zone3_summary();
            println!("field   zone-3 acc {:.3} m ({:.1}% in)  cov {:.3} m ({:.1}% in)", z[0], z[1], z[2], z[3]);
            for (kind, m) in &outcome.baselines {
                let z = m.zone3_summary();
                println!("{:<7} zone-3 acc {:.3} m ({:.1}% in)  cov {:.3} m ({:.1}% in)", kind.name(), z[0], z[1], z[2], z[3]);
            }
            println!("results in {}", a.out.display());
        }
        Command::Ablate(a) => {
            let mut table = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                    toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Toml(format!("{}: {e}", p.display())))?
                }
                None => toml::Table::new(),
            };
            let set = |t: &mut toml::Table, k: &str, v: Value| virus_field_cli::config::set_dotted(t, k, v);
            if !a.arms.is_empty() {
                set(&mut table, "arms", Value::Array(a.arms.iter().map(|s| Value::String(s.clone())).collect()))?;
            }
            if !a.grids.is_empty() {
                set(&mut table, "grids", Value::Array(a.grids.iter().map(|s| Value::String(s.clone())).collect()))?;
            }
            if let Some(n) = a.seeds {
                set(&mut table, "seeds", Value::Array((0..n).map(|s| int(s)).collect::<Result<_>>()?))?;
            }
            if let Some(n) = a.steps {
                set(&mut table, "base.train.steps", int(n)?)?;
            }
            if let Some(s) = &a.scene {
                set(&mut table, "base.scene", Value::String(s.clone()))?;
            }
            for kv in &a.set {
                let Some((k, v)) = kv.split_once('=') else {
                    return usage(format!("--set expects KEY=VALUE, got '{kv}'"));
                };
                set(&mut table, k.trim(), parse_value(v.trim()))?;
            }
            let matrix: AblationMatrix = Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Toml(e.to_string()))?;
            let report = commands::ablate(&matrix, Some(&a.out), true)?;
            print!("{}", report.to_text());
        }
        Command::RenderScan(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let scan = commands::render_scan_at(&ckpt, a.frame, a.step_deg, a.dataset)?;
            match &a.out {
                Some(p) => scan.write_csv(p)?,
                None => print!("{}", scan.to_csv()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
