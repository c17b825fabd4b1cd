//! Ray batches drawn from a recorded dataset.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::occgrid::DepthRay;
use crate::render::Ray;
use crate::scene::SceneFrame;
use crate::simrig::{irs_directions, Dataset, Pinhole, RigConfig, SensorPose};

/// Which recorded modalities supervise training. Serialized as the
/// `cam+uss+irs` string form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SensorSet {
    pub cam: bool,
    pub uss: bool,
    pub irs: bool,
    /// Dense per-pixel depth from a simulated depth camera.
    pub rgbd: bool,
}

impl SensorSet {
    pub const ALL_LOW_COST: SensorSet = SensorSet { cam: true, uss: true, irs: true, rgbd: false };
    pub const CAM: SensorSet = SensorSet { cam: true, uss: false, irs: false, rgbd: false };

    pub fn validate(&self) -> Result<()> {
        if !(self.cam || self.uss || self.irs || self.rgbd) {
            return invalid("at least one sensor must be enabled");
        }
        Ok(())
    }

    pub fn any_depth(&self) -> bool {
        self.uss || self.irs || self.rgbd
    }
}

impl fmt::Display for SensorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.cam, "cam"), (self.uss, "uss"), (self.irs, "irs"), (self.rgbd, "rgbd")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        write!(f, "{}", names.join("+"))
    }
}

/// Parses `cam+uss+irs` (commas also accepted).
impl FromStr for SensorSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = SensorSet { cam: false, uss: false, irs: false, rgbd: false };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            let flag = match part.to_ascii_lowercase().as_str() {
                "cam" => &mut set.cam,
                "uss" => &mut set.uss,
                "irs" => &mut set.irs,
                "rgbd" => &mut set.rgbd,
                other => return invalid(format!("unknown sensor '{other}' (expected cam, uss, irs or rgbd)")),
            };
            *flag = true;
        }
        set.validate()?;
        Ok(set)
    }
}

impl TryFrom<String> for SensorSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SensorSet> for String {
    fn from(s: SensorSet) -> String {
        s.to_string()
    }
}

/// One supervised ray. The ray lives in unit-cube coordinates, depths are
/// world meters along the ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRecord {
    pub ray: Ray,
    pub color: Option<[f64; 3]>,
    /// IRS zone or depth-camera pixel range.
    pub point_depth: Option<f64>,
    /// Range of the stack's USS, shared by every pixel inside its cone.
    pub uss_depth: Option<f64>,
    pub frame: usize,
    pub stack: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelBatch {
    pub records: Vec<RayRecord>,
    /// March phase per ray, in `[0, 1)`.
    pub offsets: Vec<f64>,
}

impl PixelBatch {
    pub fn new(records: Vec<RayRecord>, offsets: Vec<f64>) -> Result<Self> {
        if records.is_empty() {
            return invalid("a batch needs at least one ray");
        }
        if offsets.len() != records.len() {
            return invalid("one march offset per ray required");
        }
        for r in &records {
            let bad = |d: Option<f64>| d.is_some_and(|d| !(d > 0.0 && d.is_finite()));
            if bad(r.point_depth) || bad(r.uss_depth) {
                return invalid(format!("non-positive depth on frame {} stack {}", r.frame, r.stack));
            }
        }
        Ok(Self { records, offsets })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rays(&self) -> Vec<Ray> {
        self.records.iter().map(|r| r.ray).collect()
    }
}

/// Precomputed pixel geometry and sensor associations for one dataset.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rig: RigConfig,
    pub sensors: SensorSet,
    noisy_poses: bool,
    frame: SceneFrame,
    unit_lo: [f64; 3],
    unit_hi: [f64; 3],
    camera: Pinhole,
    /// Camera-frame direction of every pixel center.
    pixel_dirs: Vec<[f64; 3]>,
    /// IRS zone seen through each pixel.
    pixel_zone: Vec<Option<usize>>,
    /// Pixels inside the USS cone.
    uss_mask: Vec<bool>,
    /// Pixels that can carry some enabled supervision.
    candidates: Vec<usize>,
    depth_stride: usize,
}

impl BatchSampler {
    pub fn new(ds: &Dataset, sensors: SensorSet, noisy_poses: bool, uss_elevation_deg: f64, depth_stride: usize) -> Result<Self> {
        sensors.validate()?;
        if sensors.rgbd && ds.meta.rig.depth_camera.is_none() {
            return invalid("rgbd supervision requested but the dataset has no depth camera");
        }
        if depth_stride == 0 {
            return invalid("depth stride must be positive");
        }
        let rig = ds.meta.rig.clone();
        let camera = rig.camera.intrinsics;
        let pixel_dirs: Vec<[f64; 3]> = (0..camera.pixel_count()).map(|i| camera.pixel_direction(i)).collect();
        let mut pixel_zone = vec![None; camera.pixel_count()];
        for (z, d) in irs_directions(&rig.irs).into_iter().enumerate() {
            if let Some(p) = camera.project(d) {
                pixel_zone[p] = Some(z);
            }
        }
        let half = rig.uss.half_angle_deg;
        let uss_mask: Vec<bool> = pixel_dirs
            .iter()
            .map(|d| {
                let az = d[1].atan2(d[0]).to_degrees();
                let el = d[2].clamp(-1.0, 1.0).asin().to_degrees();
                az.abs() <= half && el.abs() <= uss_elevation_deg
            })
            .collect();
        let candidates: Vec<usize> = (0..camera.pixel_count())
            .filter(|&p| sensors.cam || sensors.rgbd || (sensors.irs && pixel_zone[p].is_some()) || (sensors.uss && uss_mask[p]))
            .collect();
        if candidates.is_empty() {
            return invalid(format!("sensor set {sensors} supervises no camera pixel"));
        }
        let frame = ds.scene_frame();
        let (unit_lo, unit_hi) = frame.unit_box();
        Ok(Self {
            rig,
            sensors,
            noisy_poses,
            frame,
            unit_lo,
            unit_hi,
            camera,
            pixel_dirs,
            pixel_zone,
            uss_mask,
            candidates,
            depth_stride,
        })
    }

    pub fn scene_frame(&self) -> &SceneFrame {
        &self.frame
    }

    pub fn camera(&self) -> &Pinhole {
        &self.camera
    }

    pub fn pixel_zone(&self) -> &[Option<usize>] {
        &self.pixel_zone
    }

    pub fn uss_mask(&self) -> &[bool] {
        &self.uss_mask
    }

    /// Pose the training rays are cast from: the noisy estimate when
    /// requested, the true pose otherwise.
    pub fn stack_pose(&self, ds: &Dataset, frame: usize, stack: usize) -> SensorPose {
        let f = &ds.frames[frame];
        self.rig.stack_pose(if self.noisy_poses { f.noisy_pose } else { f.pose }, stack)
    }

    /// Unit-cube ray through one pixel, clipped to the scene box.
    pub fn pixel_ray(&self, pose: &SensorPose, pixel: usize) -> Option<Ray> {
        let origin = self.frame.to_unit(pose.position);
        Ray::clipped(origin, pose.to_world(self.pixel_dirs[pixel]), f64::INFINITY, self.unit_lo, self.unit_hi)
    }

    pub fn record(&self, ds: &Dataset, frame: usize, stack: usize, pixel: usize) -> Option<RayRecord> {
        let ray = self.pixel_ray(&self.stack_pose(ds, frame, stack), pixel)?;
        let sf = &ds.frames[frame].stacks[stack];
        let color = self.sensors.cam.then(|| sf.image.pixel(pixel));
        let mut point_depth = None;
        if self.sensors.irs {
            if let Some(z) = self.pixel_zone[pixel] {
                let zone = sf.irs[z];
                if zone.valid && zone.range > 0.0 {
                    point_depth = Some(zone.range);
                }
            }
        }
        if self.sensors.rgbd {
            if let Some(d) = sf.depth.as_ref().map(|d| d[pixel] as f64).filter(|&d| d > 0.0) {
                point_depth = Some(d);
            }
        }
        let uss_depth = if self.sensors.uss && self.uss_mask[pixel] { sf.uss.filter(|&d| d > 0.0) } else { None };
        Some(RayRecord { ray, color, point_depth, uss_depth, frame, stack })
    }

    /// `n` records drawn uniformly over the candidate pixels of the given
    /// frames and all stacks.
    pub fn sample(&self, ds: &Dataset, frames: &[usize], n: usize, rng: &mut impl Rng) -> Result<PixelBatch> {
        if frames.is_empty() {
            return invalid("no frames available to sample from");
        }
        let stacks = self.rig.stacks.len();
        let mut records = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n);
        let mut misses = 0usize;
        while records.len() < n {
            let f = frames[rng.random_range(0..frames.len())];
            let s = rng.random_range(0..stacks);
            let p = self.candidates[rng.random_range(0..self.candidates.len())];
            let offset = rng.random::<f64>();
            match self.record(ds, f, s, p) {
                Some(r) => {
                    records.push(r);
                    offsets.push(offset);
                }
                None => {
                    misses += 1;
                    if misses > 16 * n + 64 {
                        return invalid("sensor rays do not enter the scene box");
                    }
                }
            }
        }
        PixelBatch::new(records, offsets)
    }

    /// Every pixel of one camera image seen from `pose`, in pixel order.
    /// Pixels whose ray misses the scene box are `None`.
    pub fn image_rays(&self, pose: &SensorPose) -> Vec<Option<Ray>> {
        (0..self.camera.pixel_count()).map(|p| self.pixel_ray(pose, p)).collect()
    }

    /// Range rays of one frame for the grid's depth update, per stack:
    /// unit-cube origin plus unit-length depths. IRS zones when enabled,
    /// and every `depth_stride`-th depth-camera pixel when enabled.
    pub fn depth_rays(&self, ds: &Dataset, frame: usize) -> Vec<([f64; 3], Vec<DepthRay>)> {
        let zone_dirs = irs_directions(&self.rig.irs);
        let mut out = Vec::new();
        for (s, sf) in ds.frames[frame].stacks.iter().enumerate() {
            let pose = self.stack_pose(ds, frame, s);
            let mut rays = Vec::new();
            if self.sensors.irs {
                for (z, d) in sf.irs.iter().zip(&zone_dirs) {
                    rays.push(DepthRay { direction: pose.to_world(*d), depth: self.frame.to_unit_len(z.range), valid: z.valid });
                }
            }
            if self.sensors.rgbd {
                if let Some(depth) = &sf.depth {
                    for p in (0..depth.len()).step_by(self.depth_stride) {
                        let d = depth[p] as f64;
                        rays.push(DepthRay {
                            direction: pose.to_world(self.pixel_dirs[p]),
                            depth: self.frame.to_unit_len(d),
                            valid: d > 0.0,
                        });
                    }
                }
            }
            if !rays.is_empty() {
                out.push((self.frame.to_unit(pose.position), rays));
            }
        }
        out
    }
}
