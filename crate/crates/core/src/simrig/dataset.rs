//! Trajectories, dataset generation and the on-disk dataset layout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::Environment;
use super::sensors::{
    sense_camera, sense_depth, sense_irs, sense_lidar, sense_uss, Image, IrsZone, LidarReturn, PlanarPose, RigConfig,
};
use crate::error::{invalid, Error, Result};
use crate::scene::SceneFrame;

/// Robots keep at least this far from any wall.
pub const MIN_CLEARANCE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub t: f64,
    pub pose: PlanarPose,
}

fn heading(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0])
}

/// `n` evenly spaced poses from `a` to `b`, facing along the line.
pub fn line_trajectory(a: [f64; 2], b: [f64; 2], n: usize, dt: f64) -> Vec<TimedPose> {
    let yaw = heading(a, b);
    (0..n)
        .map(|i| {
            let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            TimedPose { t: i as f64 * dt, pose: PlanarPose::new(a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), yaw) }
        })
        .collect()
}

/// Closed polyline traversed once at `spacing` meters per frame, turning in
/// place at corners in steps of at most `turn_deg`.
pub fn loop_trajectory(waypoints: &[[f64; 2]], spacing: f64, turn_deg: f64, dt: f64) -> Vec<TimedPose> {
    let mut poses = Vec::new();
    let n = waypoints.len();
    for i in 0..n {
        let a = waypoints[i];
        let b = waypoints[(i + 1) % n];
        let yaw = heading(a, b);
        if let Some(last) = poses.last().map(|p: &PlanarPose| p.yaw) {
            let mut turn = yaw - last;
            turn = (turn + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
            let steps = (turn.abs() / turn_deg.to_radians()).ceil() as usize;
            for k in 1..steps {
                poses.push(PlanarPose::new(a[0], a[1], last + turn * k as f64 / steps as f64));
            }
        }
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let count = (len / spacing).round().max(1.0) as usize;
        for k in 0..count {
            let s = k as f64 / count as f64;
            poses.push(PlanarPose::new(a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), yaw));
        }
    }
    poses.into_iter().enumerate().map(|(i, pose)| TimedPose { t: i as f64 * dt, pose }).collect()
}

/// Named trajectories for the bundled scenes.
pub fn trajectory_preset(scene: &str, preset: &str) -> Result<Vec<TimedPose>> {
    let dt = 0.5;
    match (scene, preset) {
        ("mini-office", "loop") => Ok(loop_trajectory(&[[2.8, 2.8], [5.8, 2.8], [5.8, 5.2], [2.8, 5.2]], 0.15, 30.0, dt)),
        ("mini-office", "line") => Ok(line_trajectory([1.2, 3.0], [7.6, 3.0], 60, dt)),
        ("mini-commons", "loop") => Ok(loop_trajectory(&[[3.0, 3.0], [15.0, 3.0], [15.0, 9.0], [3.0, 9.0]], 0.3, 30.0, dt)),
        ("mini-commons", "line") => Ok(line_trajectory([2.0, 4.5], [16.0, 4.5], 100, dt)),
        (_, "loop" | "line") => invalid(format!("no trajectory presets for scene '{scene}'")),
        _ => invalid(format!("unknown trajectory preset '{preset}' (expected loop or line)")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseNoise {
    pub sigma_xy: f64,
    pub sigma_yaw_deg: f64,
}

impl Default for PoseNoise {
    fn default() -> Self {
        Self { sigma_xy: 0.05, sigma_yaw_deg: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackFrame {
    pub image: Image,
    pub uss: Option<f64>,
    pub irs: Vec<IrsZone>,
    pub depth: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorFrame {
    pub index: usize,
    pub timestamp: f64,
    /// Pose the measurements were taken from.
    pub pose: PlanarPose,
    /// Pose as reported to the mapper; equals `pose` without pose noise.
    pub noisy_pose: PlanarPose,
    pub stacks: Vec<StackFrame>,
    pub lidar: Vec<LidarReturn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scene: String,
    pub environment: Environment,
    pub rig: RigConfig,
    pub seed: u64,
    pub units: String,
    pub pose_noise: Option<PoseNoise>,
    pub frame_count: usize,
    pub world_min: [f64; 3],
    pub world_max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub frames: Vec<SensorFrame>,
}

/// Independent per-frame stream so frames can be generated in any order.
pub fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate_dataset(
    env: &Environment,
    trajectory: &[TimedPose],
    rig: &RigConfig,
    seed: u64,
    pose_noise: Option<PoseNoise>,
) -> Result<Dataset> {
    rig.validate()?;
    if trajectory.is_empty() {
        return invalid("trajectory is empty");
    }
    for (i, p) in trajectory.iter().enumerate() {
        env.check_pose([p.pose.x, p.pose.y, rig.sensor_height]).map_err(|e| Error::InvalidPose(format!("trajectory pose {i}: {e}")))?;
        if env.clearance([p.pose.x, p.pose.y]) < MIN_CLEARANCE {
            return Err(Error::InvalidPose(format!("trajectory pose {i} collides with a wall")));
        }
        if i > 0 && !(p.t > trajectory[i - 1].t) {
            return invalid(format!("timestamps must increase (pose {i})"));
        }
    }
    let frames: Vec<SensorFrame> = trajectory
        .par_iter()
        .enumerate()
        .map(|(i, tp)| {
            let mut rng = frame_rng(seed, i);
            let stacks = (0..rig.stacks.len())
                .map(|s| {
                    let sp = rig.stack_pose(tp.pose, s);
                    StackFrame {
                        image: sense_camera(env, &sp, &rig.camera, &mut rng),
                        uss: sense_uss(env, &sp, &rig.uss, &mut rng),
                        irs: sense_irs(env, &sp, &rig.irs, &mut rng),
                        depth: rig.depth_camera.map(|d| sense_depth(env, &sp, &rig.camera.intrinsics, &d, &mut rng)),
                    }
                })
                .collect();
            let lidar = sense_lidar(env, tp.pose, rig.sensor_height, &rig.lidar, &mut rng);
            let noisy_pose = match pose_noise {
                Some(n) => {
                    let xy = Normal::new(0.0, n.sigma_xy.max(f64::MIN_POSITIVE)).expect("valid std");
                    let yaw = Normal::new(0.0, n.sigma_yaw_deg.to_radians().max(f64::MIN_POSITIVE)).expect("valid std");
                    PlanarPose::new(tp.pose.x + xy.sample(&mut rng), tp.pose.y + xy.sample(&mut rng), tp.pose.yaw + yaw.sample(&mut rng))
                }
                None => tp.pose,
            };
            SensorFrame { index: i, timestamp: tp.t, pose: tp.pose, noisy_pose, stacks, lidar }
        })
        .collect();
    let (world_min, world_max) = env.bounds();
    Ok(Dataset {
        meta: DatasetMeta {
            scene: env.name.clone(),
            environment: env.clone(),
            rig: rig.clone(),
            seed,
            units: "m".into(),
            pose_noise,
            frame_count: frames.len(),
            world_min,
            world_max,
        },
        frames,
    })
}

/// Margin around the world box when mapping it into the unit cube.
pub const SCENE_MARGIN: f64 = 0.05;

impl Dataset {
    pub fn scene_frame(&self) -> SceneFrame {
        SceneFrame::from_box(self.meta.world_min, self.meta.world_max, SCENE_MARGIN)
    }

    /// Fraction of valid IRS zones over all frames and stacks.
    pub fn irs_validity(&self) -> f64 {
        let (mut valid, mut total) = (0usize, 0usize);
        for f in &self.frames {
            for s in &f.stacks {
                valid += s.irs.iter().filter(|z| z.valid).count();
                total += s.irs.len();
            }
        }
        if total == 0 {
            0.0
        } else {
            valid as f64 / total as f64
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        let mut poses = String::from("index,t,x,y,yaw,x_noisy,y_noisy,yaw_noisy\n");
        for f in &self.frames {
            let (p, q) = (f.pose, f.noisy_pose);
            writeln!(poses, "{},{},{},{},{},{},{},{}", f.index, f.timestamp, p.x, p.y, p.yaw, q.x, q.y, q.yaw).expect("string write");
        }
        fs::write(dir.join("poses.csv"), poses)?;
        for f in &self.frames {
            let fd = dir.join("frames").join(format!("{:04}", f.index));
            fs::create_dir_all(&fd)?;
            let mut uss = String::from("stack,range_m,valid\n");
            let mut irs = String::from("stack,zone,range_m,valid\n");
            for (s, st) in f.stacks.iter().enumerate() {
                write_ppm(&fd.join(format!("cam{s}.ppm")), &st.image)?;
                match st.uss {
                    Some(r) => writeln!(uss, "{s},{r},1"),
                    None => writeln!(uss, "{s},0,0"),
                }
                .expect("string write");
                for (z, zone) in st.irs.iter().enumerate() {
                    writeln!(irs, "{s},{z},{},{}", zone.range, u8::from(zone.valid)).expect("string write");
                }
                if let Some(d) = &st.depth {
                    let bytes: Vec<u8> = d.iter().flat_map(|v| v.to_le_bytes()).collect();
                    fs::write(fd.join(format!("depth{s}.bin")), bytes)?;
                }
            }
            fs::write(fd.join("uss.csv"), uss)?;
            fs::write(fd.join("irs.csv"), irs)?;
            let mut lidar = String::from("angle_deg,range_m,elevation_deg\n");
            for r in &f.lidar {
                writeln!(lidar, "{},{},{}", r.azimuth_deg, r.range, r.elevation_deg).expect("string write");
            }
            fs::write(fd.join("lidar.csv"), lidar)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| Error::Format(format!("cannot read dataset at {}: {e}", dir.display())))?;
        let mut meta: DatasetMeta = serde_json::from_str(&meta_text)?;
        meta.environment.rebuild()?;
        let stacks = meta.rig.stacks.len();
        let k = meta.rig.camera.intrinsics;
        let poses = read_csv(&dir.join("poses.csv"), 8)?;
        if poses.len() != meta.frame_count {
            return Err(Error::Format(format!("poses.csv has {} rows, meta says {}", poses.len(), meta.frame_count)));
        }
        let mut frames = Vec::with_capacity(poses.len());
        for row in poses {
            let index = row[0] as usize;
            let fd = dir.join("frames").join(format!("{index:04}"));
            let uss = read_csv(&fd.join("uss.csv"), 3)?;
            let irs = read_csv(&fd.join("irs.csv"), 4)?;
            let mut st = Vec::with_capacity(stacks);
            for s in 0..stacks {
                let image = read_ppm(&fd.join(format!("cam{s}.ppm")))?;
                if image.width != k.width || image.height != k.height {
                    return Err(Error::Format(format!("frame {index} camera {s} has the wrong size")));
                }
                let u = uss.iter().find(|r| r[0] as usize == s).ok_or_else(|| Error::Format(format!("frame {index}: no USS row for stack {s}")))?;
                let zones: Vec<IrsZone> = irs.iter().filter(|r| r[0] as usize == s).map(|r| IrsZone { range: r[2], valid: r[3] != 0.0 }).collect();
                let depth_path = fd.join(format!("depth{s}.bin"));
                let depth = if depth_path.exists() {
                    let b = fs::read(&depth_path)?;
                    if b.len() != 4 * k.pixel_count() {
                        return Err(Error::Format(format!("frame {index}: depth image has the wrong size")));
                    }
                    Some(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
                } else {
                    None
                };
                st.push(StackFrame { image, uss: (u[2] != 0.0).then_some(u[1]), irs: zones, depth });
            }
            let lidar = read_csv(&fd.join("lidar.csv"), 3)?
                .into_iter()
                .map(|r| LidarReturn { azimuth_deg: r[0], range: r[1], elevation_deg: r[2] })
                .collect();
            frames.push(SensorFrame {
                index,
                timestamp: row[1],
                pose: PlanarPose::new(row[2], row[3], row[4]),
                noisy_pose: PlanarPose::new(row[5], row[6], row[7]),
                stacks: st,
                lidar,
            });
        }
        Ok(Self { meta, frames })
    }
}

fn read_csv(path: &Path, cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match row {
            Ok(r) if r.len() == cols => rows.push(r),
            _ => return Err(Error::Format(format!("{} line {}: expected {cols} numeric fields", path.display(), n + 1))),
        }
    }
    Ok(rows)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let bad = || Error::Format(format!("{} is not a binary 8-bit PPM", path.display()));
    // header: four whitespace-separated tokens, then one whitespace byte
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad());
        }
        tokens.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad())?.to_string());
    }
    if tokens[0] != "P6" || tokens[3] != "255" {
        return Err(bad());
    }
    let width: usize = tokens[1].parse().map_err(|_| bad())?;
    let height: usize = tokens[2].parse().map_err(|_| bad())?;
    let data = bytes.get(i + 1..).ok_or_else(bad)?.to_vec();
    if data.len() != 3 * width * height {
        return Err(bad());
    }
    Ok(Image { width, height, data })
}
