//! Run configuration: a TOML file, dotted-key overrides on top, then
//! validation before anything is computed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use virus_field::simrig::{generate_dataset, trajectory_preset, Dataset, Environment, PoseNoise, RigConfig, TimedPose};
use virus_field::train::TrainConfig;

use crate::error::{usage, CliError, Result};

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene preset name or path to an environment JSON file.
    pub scene: String,
    /// Trajectory preset name or path to a JSON list of timed poses.
    pub trajectory: String,
    /// A previously generated dataset directory. When set it replaces
    /// simulation from `scene` and `trajectory`.
    pub dataset: Option<PathBuf>,
    /// Seeds both the simulator and training.
    pub seed: u64,
    /// Simulate odometry drift so `train.noisy_poses` has something to use.
    pub pose_noise: bool,
    pub out: PathBuf,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub rig: RigConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: "mini-office".into(),
            trajectory: "loop".into(),
            dataset: None,
            seed: 0,
            pose_noise: false,
            out: PathBuf::from("runs/latest"),
            checkpoint_every: 500,
            rig: RigConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Parses a flag value as a TOML literal, falling back to a bare string so
/// `--set scene=mini-commons` needs no quoting.
pub fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return usage(format!("malformed key '{key}'"));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return usage(format!("'{p}' in '{key}' is not a table")),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Loads `file` (or the defaults), applies `key=value` overrides in
    /// order and validates the result.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(CliError::io(p))?;
                toml::from_str::<Table>(&text).map_err(|e| CliError::Toml(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            set_dotted(&mut table, k, v.clone())?;
        }
        let mut cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Toml(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.rig.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.train.seed != self.seed {
            return usage("train.seed is derived from seed and must not differ");
        }
        if self.train.sensors.rgbd && self.rig.depth_camera.is_none() && self.dataset.is_none() {
            return usage("rgbd supervision needs rig.depth_camera");
        }
        if self.train.noisy_poses && !self.pose_noise && self.dataset.is_none() {
            return usage("train.noisy_poses needs pose_noise = true");
        }
        if self.dataset.is_none() {
            self.environment()?;
            self.trajectory()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Toml(e.to_string()))
    }

    pub fn environment(&self) -> Result<Environment> {
        let path = Path::new(&self.scene);
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(path).map_err(CliError::io(path))?;
            let mut env: Environment = serde_json::from_str(&text)?;
            env.rebuild()?;
            return Ok(env);
        }
        Environment::preset(&self.scene).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn trajectory(&self) -> Result<Vec<TimedPose>> {
        let path = Path::new(&self.trajectory);
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(path).map_err(CliError::io(path))?;
            return Ok(serde_json::from_str(&text)?);
        }
        trajectory_preset(&self.scene, &self.trajectory).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Reads `dataset` when set, otherwise simulates it.
    pub fn load_dataset(&self) -> Result<Dataset> {
        if let Some(dir) = &self.dataset {
            return Ok(Dataset::read(dir)?);
        }
        let noise = self.pose_noise.then(PoseNoise::default);
        Ok(generate_dataset(&self.environment()?, &self.trajectory()?, &self.rig, self.seed, noise)?)
    }
}

/// FNV-1a over the resolved config text, stored in checkpoints.
pub fn config_hash(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
