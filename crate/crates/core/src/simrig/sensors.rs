//! Analytic sensor models on top of [`Environment::raycast`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::env::Environment;
use crate::error::{invalid, Result};

/// Robot pose on the floor plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    /// Radians, counter-clockwise from +x.
    pub yaw: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    /// Composes a mount offset expressed in the robot frame.
    pub fn compose(&self, offset: [f64; 2], yaw_offset: f64) -> PlanarPose {
        let (s, c) = self.yaw.sin_cos();
        PlanarPose { x: self.x + c * offset[0] - s * offset[1], y: self.y + s * offset[0] + c * offset[1], yaw: self.yaw + yaw_offset }
    }
}

/// A sensor's world placement: position plus forward/left/up axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorPose {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub left: [f64; 3],
    pub up: [f64; 3],
}

impl SensorPose {
    pub fn level(pose: PlanarPose, height: f64) -> Self {
        let (s, c) = pose.yaw.sin_cos();
        Self { position: [pose.x, pose.y, height], forward: [c, s, 0.0], left: [-s, c, 0.0], up: [0.0, 0.0, 1.0] }
    }

    pub fn to_world(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.forward[a] * v[0] + self.left[a] * v[1] + self.up[a] * v[2])
    }

    /// Horizontal direction at `angle` radians left of forward.
    pub fn planar(&self, angle: f64) -> [f64; 3] {
        let (s, c) = angle.sin_cos();
        self.to_world([c, s, 0.0])
    }
}

/// Pinhole camera with square pixels looking along the sensor's forward
/// axis. Pixel `(u, v)` spans `[u, u + 1) x [v, v + 1)`; `v` grows
/// downward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pinhole {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub hfov_deg: f64,
}

impl Pinhole {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return invalid(format!("invalid intrinsics {self:?}"));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.hfov_deg.to_radians()).tan()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit camera-frame (forward, left, up) direction through the
    /// continuous image point `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> [f64; 3] {
        let f = self.focal();
        let d = [1.0, -(u - 0.5 * self.width as f64) / f, -(v - 0.5 * self.height as f64) / f];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d.map(|x| x / n)
    }

    pub fn pixel_direction(&self, index: usize) -> [f64; 3] {
        self.direction((index % self.width) as f64 + 0.5, (index / self.width) as f64 + 0.5)
    }

    /// Pixel whose footprint contains the camera-frame direction `d`.
    pub fn project(&self, d: [f64; 3]) -> Option<usize> {
        if d[0] <= 0.0 {
            return None;
        }
        let f = self.focal();
        let u = 0.5 * self.width as f64 - f * d[1] / d[0];
        let v = 0.5 * self.height as f64 - f * d[2] / d[0];
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some(v as usize * self.width + u as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub intrinsics: Pinhole,
    pub noise: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { intrinsics: Pinhole { width: 64, height: 48, hfov_deg: 90.0 }, noise: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UssConfig {
    pub half_angle_deg: f64,
    pub max_range: f64,
    pub fan_rays: usize,
    pub noise: f64,
}

impl Default for UssConfig {
    fn default() -> Self {
        Self { half_angle_deg: 25.0, max_range: 8.0, fan_rays: 129, noise: 0.02 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrsConfig {
    /// Zone layout, square field of view `fov_deg` on both axes.
    pub zones: usize,
    pub fov_deg: f64,
    pub max_range: f64,
    pub noise: f64,
    pub dropout: f64,
}

impl Default for IrsConfig {
    fn default() -> Self {
        Self { zones: 8, fov_deg: 45.0, max_range: 4.0, noise: 0.01, dropout: 0.05 }
    }
}

impl IrsConfig {
    pub fn pinhole(&self) -> Pinhole {
        Pinhole { width: self.zones, height: self.zones, hfov_deg: self.fov_deg }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub step_deg: f64,
    pub max_range: f64,
    pub noise: f64,
    /// Ring elevations in degrees; 0 is the planar ring.
    pub rings_deg: Vec<f64>,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self { step_deg: 0.5, max_range: 30.0, noise: 0.01, rings_deg: vec![0.0] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthCameraConfig {
    pub max_range: f64,
    pub noise: f64,
}

impl Default for DepthCameraConfig {
    fn default() -> Self {
        Self { max_range: 6.0, noise: 0.01 }
    }
}

/// One sensor stack: camera, USS, IRS and optional depth camera sharing a
/// mount.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMount {
    /// Robot-frame offset in meters.
    pub offset: [f64; 2],
    pub yaw_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub stacks: Vec<StackMount>,
    pub sensor_height: f64,
    pub camera: CameraConfig,
    pub uss: UssConfig,
    pub irs: IrsConfig,
    pub lidar: LidarConfig,
    pub depth_camera: Option<DepthCameraConfig>,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            stacks: vec![StackMount { offset: [0.0, 0.135], yaw_deg: 14.5 }, StackMount { offset: [0.0, -0.135], yaw_deg: -14.5 }],
            sensor_height: 1.0,
            camera: CameraConfig::default(),
            uss: UssConfig::default(),
            irs: IrsConfig::default(),
            lidar: LidarConfig::default(),
            depth_camera: Some(DepthCameraConfig::default()),
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.intrinsics.validate()?;
        self.irs.pinhole().validate()?;
        if self.stacks.is_empty() {
            return invalid("rig needs at least one sensor stack");
        }
        if self.uss.fan_rays < 2 || !(self.uss.half_angle_deg > 0.0 && self.uss.half_angle_deg < 90.0) {
            return invalid("USS needs a fan of at least two rays and a half angle in (0, 90)");
        }
        if !(0.0..1.0).contains(&self.irs.dropout) {
            return invalid("IRS dropout must be in [0, 1)");
        }
        if !(self.lidar.step_deg > 0.0) || self.lidar.rings_deg.is_empty() {
            return invalid("LiDAR needs a positive angular step and at least one ring");
        }
        Ok(())
    }

    pub fn stack_pose(&self, robot: PlanarPose, stack: usize) -> SensorPose {
        let m = self.stacks[stack];
        SensorPose::level(robot.compose(m.offset, m.yaw_deg.to_radians()), self.sensor_height)
    }
}

fn gaussian(rng: &mut impl Rng, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("positive std").sample(rng)
    } else {
        0.0
    }
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, i: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.data[3 * i + c] as f64 / 255.0)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn sense_camera(env: &Environment, pose: &SensorPose, cam: &CameraConfig, rng: &mut impl Rng) -> Image {
    let k = &cam.intrinsics;
    let mut data = Vec::with_capacity(3 * k.pixel_count());
    for i in 0..k.pixel_count() {
        let d = pose.to_world(k.pixel_direction(i));
        let color = env.raycast(pose.position, d).map_or([0.0; 3], |h| h.color);
        for c in color {
            data.push(quantize(c + gaussian(rng, cam.noise)));
        }
    }
    Image { width: k.width, height: k.height, data }
}

/// Per-pixel range along each pixel ray; 0 where beyond range.
pub fn sense_depth(env: &Environment, pose: &SensorPose, k: &Pinhole, cfg: &DepthCameraConfig, rng: &mut impl Rng) -> Vec<f32> {
    (0..k.pixel_count())
        .map(|i| {
            let d = pose.to_world(k.pixel_direction(i));
            match env.raycast(pose.position, d) {
                Some(h) if h.distance <= cfg.max_range => (h.distance + gaussian(rng, cfg.noise)).max(1e-3) as f32,
                _ => 0.0,
            }
        })
        .collect()
}

/// Fan angles (radians, left of forward) spanning the USS cone.
pub fn uss_fan(cfg: &UssConfig) -> Vec<f64> {
    let h = cfg.half_angle_deg.to_radians();
    (0..cfg.fan_rays).map(|i| -h + 2.0 * h * i as f64 / (cfg.fan_rays - 1) as f64).collect()
}

/// Nearest echo over the cone fan, `None` for no echo.
pub fn sense_uss(env: &Environment, pose: &SensorPose, cfg: &UssConfig, rng: &mut impl Rng) -> Option<f64> {
    let nearest = uss_fan(cfg)
        .into_iter()
        .filter_map(|a| env.raycast(pose.position, pose.planar(a)).map(|h| h.distance))
        .fold(f64::INFINITY, f64::min);
    if nearest > cfg.max_range {
        return None;
    }
    Some((nearest + gaussian(rng, cfg.noise)).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IrsZone {
    pub range: f64,
    pub valid: bool,
}

/// Unit camera-frame direction of each IRS zone, row-major.
pub fn irs_directions(cfg: &IrsConfig) -> Vec<[f64; 3]> {
    let k = cfg.pinhole();
    (0..k.pixel_count()).map(|i| k.pixel_direction(i)).collect()
}

pub fn sense_irs(env: &Environment, pose: &SensorPose, cfg: &IrsConfig, rng: &mut impl Rng) -> Vec<IrsZone> {
    irs_directions(cfg)
        .into_iter()
        .map(|d| {
            let hit = env.raycast(pose.position, pose.to_world(d));
            let noise = gaussian(rng, cfg.noise);
            let dropped = rng.random_bool(cfg.dropout);
            match hit {
                Some(h) if h.distance <= cfg.max_range && !dropped => IrsZone { range: (h.distance + noise).max(1e-3), valid: true },
                _ => IrsZone { range: 0.0, valid: false },
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarReturn {
    /// Degrees, relative to the robot heading.
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub range: f64,
}

impl LidarReturn {
    /// World point for a sensor at `pose` and `height`.
    pub fn world_point(&self, pose: PlanarPose, height: f64) -> [f64; 3] {
        let az = pose.yaw + self.azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        let h = self.range * el.cos();
        [pose.x + h * az.cos(), pose.y + h * az.sin(), height + self.range * el.sin()]
    }
}

pub fn lidar_azimuths(step_deg: f64) -> Vec<f64> {
    let n = (360.0 / step_deg - 1e-9).ceil() as usize;
    (0..n).map(|k| k as f64 * step_deg).collect()
}

/// Beams beyond max range are dropped.
pub fn sense_lidar(env: &Environment, pose: PlanarPose, height: f64, cfg: &LidarConfig, rng: &mut impl Rng) -> Vec<LidarReturn> {
    let base = SensorPose::level(pose, height);
    let mut out = Vec::new();
    for &el in &cfg.rings_deg {
        let (se, ce) = el.to_radians().sin_cos();
        for az in lidar_azimuths(cfg.step_deg) {
            let (sa, ca) = az.to_radians().sin_cos();
            let d = base.to_world([ce * ca, ce * sa, se]);
            let noise = gaussian(rng, cfg.noise);
            if let Some(h) = env.raycast(base.position, d) {
                if h.distance <= cfg.max_range {
                    out.push(LidarReturn { azimuth_deg: az, elevation_deg: el, range: h.distance + noise });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simrig::env::Polygon;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn red_room() -> Environment {
        Environment::square_room(4.0, 3.0, [1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn center_ray_is_optical_axis() {
        let k = CameraConfig::default().intrinsics;
        assert_eq!(k.direction(32.0, 24.0), [1.0, 0.0, 0.0]);
        let d = k.direction(0.0, 24.0);
        assert!((d[1].atan2(d[0]).to_degrees() - 45.0).abs() < 1e-12);
        for i in [0, 100, 3071] {
            assert_eq!(k.project(k.pixel_direction(i)), Some(i));
        }
    }

    #[test]
    fn camera_facing_uniform_wall() {
        // narrow camera close to a red wall sees only the wall
        let env = red_room();
        let cam = CameraConfig { intrinsics: Pinhole { width: 16, height: 12, hfov_deg: 40.0 }, noise: 0.01 };
        let pose = SensorPose::level(PlanarPose::new(3.5, 2.0, 0.0), 1.5);
        let img = sense_camera(&env, &pose, &cam, &mut ChaCha8Rng::seed_from_u64(0));
        for i in 0..cam.intrinsics.pixel_count() {
            let p = img.pixel(i);
            assert!(p[1] < 0.06 && p[2] < 0.06, "{p:?}");
            assert!(p[0] > 0.94);
        }
        let quiet = CameraConfig { noise: 0.0, ..cam };
        let a = sense_camera(&env, &pose, &quiet, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sense_camera(&env, &pose, &quiet, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn uss_perpendicular_wall_and_nearest_target() {
        let env = red_room();
        let cfg = UssConfig { noise: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pose = SensorPose::level(PlanarPose::new(3.0, 2.0, 0.0), 1.0);
        assert!((sense_uss(&env, &pose, &cfg, &mut rng).unwrap() - 1.0).abs() < 1e-12);
        // a post 1 m ahead inside the cone dominates the wall 2 m away
        let room = Polygon::rect("room", [0.0, 0.0], [4.0, 4.0], [1.0; 3]);
        let post = Polygon::rect("post", [3.0, 2.3], [3.2, 2.5], [1.0; 3]);
        let env2 = Environment::new("t", room, vec![post], 0.0, 3.0).unwrap();
        let pose = SensorPose::level(PlanarPose::new(2.0, 2.0, 0.0), 1.0);
        let r = sense_uss(&env2, &pose, &cfg, &mut rng).unwrap();
        let oracle = uss_fan(&cfg).iter().filter_map(|&a| env2.raycast(pose.position, pose.planar(a))).map(|h| h.distance).fold(f64::INFINITY, f64::min);
        assert_eq!(r, oracle);
        assert!(r < 1.3);
    }

    #[test]
    fn uss_empty_cone() {
        let env = Environment::square_room(30.0, 3.0, [1.0; 3]).unwrap();
        let pose = SensorPose::level(PlanarPose::new(1.0, 15.0, 0.0), 1.0);
        assert_eq!(sense_uss(&env, &pose, &UssConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)), None);
    }

    #[test]
    fn irs_range_limit_and_center_zones() {
        let env = Environment::square_room(20.0, 30.0, [1.0; 3]).unwrap();
        let cfg = IrsConfig { noise: 0.0, dropout: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let far = SensorPose::level(PlanarPose::new(15.0, 10.0, 0.0), 15.0);
        assert!(sense_irs(&env, &far, &cfg, &mut rng).iter().all(|z| !z.valid));
        let near = SensorPose::level(PlanarPose::new(18.0, 10.0, 0.0), 15.0);
        let zones = sense_irs(&env, &near, &cfg, &mut rng);
        for i in [27, 28, 35, 36] {
            let d = irs_directions(&cfg)[i];
            assert!(zones[i].valid);
            assert!((zones[i].range - 2.0 / d[0]).abs() < 1e-12);
            assert!((zones[i].range - 2.0).abs() < 0.01);
        }
    }

    #[test]
    fn irs_validity_matches_dropout_statistics() {
        let env = Environment::square_room(6.0, 30.0, [1.0; 3]).unwrap();
        let cfg = IrsConfig::default();
        let pose = SensorPose::level(PlanarPose::new(3.0, 3.0, 0.0), 15.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // every zone is in range here, so validity is 1 - dropout
        let mut valid = 0usize;
        let frames = 10_000;
        for _ in 0..frames {
            valid += sense_irs(&env, &pose, &cfg, &mut rng).iter().filter(|z| z.valid).count();
        }
        let frac = valid as f64 / (frames * 64) as f64;
        // binomial standard error is below 1e-3
        assert!((frac - 0.95).abs() < 0.004, "{frac}");
    }

    #[test]
    fn uss_never_exceeds_irs_inside_cone() {
        let env = Environment::preset("mini-office").unwrap();
        let rig = RigConfig::default();
        let uss = UssConfig { noise: 0.0, ..rig.uss };
        let irs = IrsConfig { noise: 0.0, dropout: 0.0, ..rig.irs };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (x, y, yaw) in [(3.0, 3.0, 0.0), (5.0, 3.0, 1.5), (3.0, 5.0, -2.0)] {
            let pose = rig.stack_pose(PlanarPose::new(x, y, yaw), 0);
            let u = sense_uss(&env, &pose, &uss, &mut rng).unwrap();
            let half = uss.half_angle_deg.to_radians();
            let mut compared = 0;
            for (z, d) in sense_irs(&env, &pose, &irs, &mut rng).iter().zip(irs_directions(&irs)) {
                let wall = env.raycast(pose.position, pose.to_world(d)).is_some_and(|h| h.surface == crate::simrig::env::Surface::Wall);
                // floor and ceiling returns lie outside the planar fan
                if z.valid && wall && d[1].atan2(d[0]).abs() <= half {
                    assert!(u <= z.range + 1e-3, "{u} vs {}", z.range);
                    compared += 1;
                }
            }
            assert!(compared > 0);
        }
    }

    #[test]
    fn lidar_reproduces_square_room() {
        let env = Environment::square_room(4.0, 3.0, [1.0; 3]).unwrap();
        let cfg = LidarConfig { step_deg: 1.0, ..Default::default() };
        let pose = PlanarPose::new(2.0, 2.0, 0.3);
        let pts = sense_lidar(&env, pose, 1.0, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(pts.len(), 360);
        for p in &pts {
            let w = p.world_point(pose, 1.0);
            let edge = [w[0], 4.0 - w[0], w[1], 4.0 - w[1]].into_iter().map(f64::abs).fold(f64::INFINITY, f64::min);
            assert!(edge < 0.05, "{w:?}");
        }
        let short = LidarConfig { max_range: 1.5, ..cfg };
        assert!(sense_lidar(&env, pose, 1.0, &short, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }
}
