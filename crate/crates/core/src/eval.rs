//! Scan-based map evaluation: a voxelized LiDAR map as ground truth,
//! planar 360 degree scans, bidirectional nearest-neighbor distances split
//! into depth zones, PSNR, sensor baselines and ablation tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::render::DepthScan;
use crate::simrig::{Dataset, PlanarPose, RigConfig, SensorFrame};
use crate::voxel;

pub const MAP_VOXEL: f64 = 0.03;
pub const MAP_MIN_POINTS: u32 = 2;
pub const COLLAPSE_BAND: f64 = 0.05;
pub const INLIER_THRESHOLD: f64 = 0.10;
/// Zones by ground-truth depth, half-open `[lo, hi)`.
pub const ZONES: [(f64, f64); 3] = [(0.0, 1.0), (0.0, 2.0), (0.0, 100.0)];

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMap {
    pub voxel: f64,
    /// Occupied voxels with their point counts.
    pub voxels: HashMap<[i64; 3], u32>,
}

impl GlobalMap {
    pub fn voxel_of(&self, p: [f64; 3]) -> [i64; 3] {
        p.map(|v| (v / self.voxel).floor() as i64)
    }

    pub fn contains(&self, v: [i64; 3]) -> bool {
        self.voxels.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Voxels with at least `min_points` points.
    pub fn build(points: impl IntoIterator<Item = [f64; 3]>, voxel: f64, min_points: u32) -> Self {
        let mut counts: HashMap<[i64; 3], u32> = HashMap::new();
        for p in points {
            *counts.entry(p.map(|v| (v / voxel).floor() as i64)).or_default() += 1;
        }
        counts.retain(|_, c| *c >= min_points);
        Self { voxel, voxels: counts }
    }

    /// World-frame LiDAR points of every frame, placed with the true poses.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let h = ds.meta.rig.sensor_height;
        let pts = ds.frames.iter().flat_map(|f| f.lidar.iter().map(move |r| r.world_point(f.pose, h)));
        Self::build(pts, MAP_VOXEL, MAP_MIN_POINTS)
    }
}

pub const GT_MAX_RANGE: f64 = 100.0;

/// Distance along each horizontal ray to the first occupied map voxel.
pub fn gt_scan(map: &GlobalMap, position: [f64; 3], angular_step_deg: f64) -> Result<DepthScan> {
    let azimuths = DepthScan::azimuths(angular_step_deg)?;
    let depths = azimuths
        .iter()
        .map(|a| {
            let r = a.to_radians();
            let dir = [r.cos(), r.sin(), 0.0];
            let mut hit = None;
            if !map.is_empty() {
                voxel::walk(position, dir, map.voxel, 0.0, GT_MAX_RANGE, |c, t0, _| {
                    if map.contains(c) {
                        hit = Some(t0);
                        return false;
                    }
                    true
                });
            }
            hit
        })
        .collect();
    Ok(DepthScan { position, angular_step_deg, azimuths_deg: azimuths, depths })
}

/// Points within `band` of `height` (closed), projected to the plane.
pub fn collapse_to_2d(points: &[[f64; 3]], height: f64, band: f64) -> Vec<[f64; 2]> {
    let (lo, hi) = (height - band, height + band);
    points.iter().filter(|p| p[2] >= lo && p[2] <= hi).map(|p| [p[0], p[1]]).collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Index of the nearest point of `to` and its distance, by exhaustive search.
pub fn nearest_brute(p: [f64; 2], to: &[[f64; 2]]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &q) in to.iter().enumerate() {
        let d = dist(p, q);
        if best.is_none_or(|b| d < b.1) {
            best = Some((i, d));
        }
    }
    best
}

/// Uniform spatial hash over planar points for nearest-neighbor queries.
pub struct PointHash<'a> {
    points: &'a [[f64; 2]],
    cell: f64,
    bins: HashMap<[i64; 2], Vec<usize>>,
    max_ring: i64,
}

impl<'a> PointHash<'a> {
    pub fn new(points: &'a [[f64; 2]], cell: f64) -> Self {
        let mut bins: HashMap<[i64; 2], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 2];
        let mut hi = [i64::MIN; 2];
        for (i, p) in points.iter().enumerate() {
            let k = [(p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64];
            for a in 0..2 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            bins.entry(k).or_default().push(i);
        }
        let span = if points.is_empty() { 0 } else { (hi[0] - lo[0]).max(hi[1] - lo[1]) };
        // wide sparse sets fall back to exhaustive search sooner
        Self { points, cell, bins, max_ring: span.clamp(1, 64) }
    }

    /// Nearest point by expanding square rings of bins. A point in ring
    /// `r + 1` is at least `r * cell` away, which bounds the search.
    pub fn nearest(&self, p: [f64; 2]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let k = [(p[0] / self.cell).floor() as i64, (p[1] / self.cell).floor() as i64];
        let mut best: Option<(usize, f64)> = None;
        for r in 0..=self.max_ring {
            for dx in -r..=r {
                for dy in -r..=r {
                    if dx.abs() != r && dy.abs() != r {
                        continue;
                    }
                    if let Some(ids) = self.bins.get(&[k[0] + dx, k[1] + dy]) {
                        for &i in ids {
                            let d = dist(p, self.points[i]);
                            if best.is_none_or(|b| d < b.1 || (d == b.1 && i < b.0)) {
                                best = Some((i, d));
                            }
                        }
                    }
                }
            }
            if let Some(b) = best {
                if b.1 <= r as f64 * self.cell {
                    return best;
                }
            }
        }
        nearest_brute(p, self.points)
    }
}

/// Nearest distance from every `from` point into `to`; `None` when `to`
/// is empty.
pub fn nnd(from: &[[f64; 2]], to: &[[f64; 2]]) -> Option<Vec<f64>> {
    if to.is_empty() {
        return None;
    }
    let hash = PointHash::new(to, MAP_VOXEL);
    Some(from.iter().map(|&p| hash.nearest(p).expect("non-empty").1).collect())
}

/// One evaluated point: the ground-truth depth that places it in a zone,
/// its nearest-neighbor distance and whether its partner sits nearer the
/// scan center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NndSample {
    pub gt_depth: f64,
    pub nnd: f64,
    pub too_close: bool,
}

/// Per-point samples for both directions at one test pose.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanComparison {
    pub accuracy: Vec<NndSample>,
    pub coverage: Vec<NndSample>,
    /// Prediction points whose azimuth has no ground-truth return.
    pub excluded_no_gt: usize,
    /// Directions skipped because the other set was empty.
    pub undefined: usize,
}

impl ScanComparison {
    pub fn extend(&mut self, other: ScanComparison) {
        self.accuracy.extend(other.accuracy);
        self.coverage.extend(other.coverage);
        self.excluded_no_gt += other.excluded_no_gt;
        self.undefined += other.undefined;
    }
}

fn azimuth_bin(gt: &DepthScan, p: [f64; 2]) -> usize {
    let a = (p[1] - gt.position[1]).atan2(p[0] - gt.position[0]).to_degrees().rem_euclid(360.0);
    ((a / gt.angular_step_deg).round() as usize) % gt.len()
}

/// Compares planar prediction points against a ground-truth scan. Each
/// prediction point takes the zone of the ground-truth azimuth it falls in.
pub fn compare_points(pred: &[[f64; 2]], gt: &DepthScan) -> ScanComparison {
    let center = [gt.position[0], gt.position[1]];
    let gt_pts: Vec<([f64; 2], f64)> = gt
        .azimuths_deg
        .iter()
        .zip(&gt.depths)
        .filter_map(|(a, d)| {
            let d = (*d)?;
            let r = a.to_radians();
            Some(([center[0] + d * r.cos(), center[1] + d * r.sin()], d))
        })
        .collect();
    let gt_xy: Vec<[f64; 2]> = gt_pts.iter().map(|p| p.0).collect();
    let mut out = ScanComparison::default();
    if gt_xy.is_empty() {
        out.undefined += 1;
        out.excluded_no_gt += pred.len();
        return out;
    }
    let gt_hash = PointHash::new(&gt_xy, MAP_VOXEL);
    for &p in pred {
        let Some(gd) = gt.depths[azimuth_bin(gt, p)] else {
            out.excluded_no_gt += 1;
            continue;
        };
        let (_, d) = gt_hash.nearest(p).expect("non-empty");
        out.accuracy.push(NndSample { gt_depth: gd, nnd: d, too_close: dist(p, center) < gd });
    }
    if pred.is_empty() {
        out.undefined += 1;
        return out;
    }
    let pred_hash = PointHash::new(pred, MAP_VOXEL);
    for &(g, gd) in &gt_pts {
        let (i, d) = pred_hash.nearest(g).expect("non-empty");
        out.coverage.push(NndSample { gt_depth: gd, nnd: d, too_close: dist(pred[i], center) < gd });
    }
    out
}

/// Compares two scans taken from the same center.
pub fn compare_scans(pred: &DepthScan, gt: &DepthScan) -> Result<ScanComparison> {
    if pred.azimuths_deg != gt.azimuths_deg {
        return invalid("scans must share their azimuths");
    }
    Ok(compare_points(&pred.points(), gt))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub count: usize,
    pub mean_nnd: f64,
    pub inlier_pct: f64,
    pub too_close_pct: f64,
    pub too_far_pct: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneMetrics {
    pub lo: f64,
    pub hi: f64,
    /// `None` for an empty zone.
    pub accuracy: Option<DirectionStats>,
    pub coverage: Option<DirectionStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub zones: Vec<ZoneMetrics>,
    pub excluded_no_gt: usize,
    pub undefined: usize,
}

fn direction_stats(samples: &[NndSample], lo: f64, hi: f64, threshold: f64) -> Option<DirectionStats> {
    let inside: Vec<&NndSample> = samples.iter().filter(|s| s.gt_depth >= lo && s.gt_depth < hi).collect();
    if inside.is_empty() {
        return None;
    }
    let n = inside.len() as f64;
    let inl = inside.iter().filter(|s| s.nnd < threshold).count();
    let close = inside.iter().filter(|s| s.nnd >= threshold && s.too_close).count();
    let far = inside.len() - inl - close;
    Some(DirectionStats {
        count: inside.len(),
        mean_nnd: inside.iter().map(|s| s.nnd).sum::<f64>() / n,
        inlier_pct: 100.0 * inl as f64 / n,
        too_close_pct: 100.0 * close as f64 / n,
        too_far_pct: 100.0 * far as f64 / n,
    })
}

pub fn zone_metrics(cmp: &ScanComparison, inlier_threshold: f64) -> ScanMetrics {
    ScanMetrics {
        zones: ZONES
            .iter()
            .map(|&(lo, hi)| ZoneMetrics {
                lo,
                hi,
                accuracy: direction_stats(&cmp.accuracy, lo, hi, inlier_threshold),
                coverage: direction_stats(&cmp.coverage, lo, hi, inlier_threshold),
            })
            .collect(),
        excluded_no_gt: cmp.excluded_no_gt,
        undefined: cmp.undefined,
    }
}

impl ScanMetrics {
    pub fn zone3(&self) -> &ZoneMetrics {
        &self.zones[2]
    }

    /// `(accuracy mean, accuracy inlier %, coverage mean, coverage inlier %)`
    /// in zone 3; NaN where absent.
    pub fn zone3_summary(&self) -> [f64; 4] {
        let z = self.zone3();
        [
            z.accuracy.map_or(f64::NAN, |s| s.mean_nnd),
            z.accuracy.map_or(f64::NAN, |s| s.inlier_pct),
            z.coverage.map_or(f64::NAN, |s| s.mean_nnd),
            z.coverage.map_or(f64::NAN, |s| s.inlier_pct),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("zone,lo_m,hi_m,direction,count,mean_nnd_m,inlier_pct,too_close_pct,too_far_pct\n");
        for (i, z) in self.zones.iter().enumerate() {
            for (name, d) in [("accuracy", z.accuracy), ("coverage", z.coverage)] {
                match d {
                    Some(d) => writeln!(
                        s,
                        "{},{},{},{name},{},{:.6},{:.4},{:.4},{:.4}",
                        i + 1,
                        z.lo,
                        z.hi,
                        d.count,
                        d.mean_nnd,
                        d.inlier_pct,
                        d.too_close_pct,
                        d.too_far_pct
                    ),
                    None => writeln!(s, "{},{},{},{name},0,,,,", i + 1, z.lo, z.hi),
                }
                .expect("string write");
            }
        }
        s
    }
}

/// `10 log10(1 / MSE)` for images with values in `[0, 1]`; infinite for
/// identical images.
pub fn psnr(rendered: &[f64], reference: &[f64]) -> Result<f64> {
    if rendered.len() != reference.len() || rendered.is_empty() {
        return invalid(format!("image sizes differ ({} vs {})", rendered.len(), reference.len()));
    }
    let mse = rendered.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rendered.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineSensor {
    Lidar,
    Irs,
    Uss,
}

impl BaselineSensor {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineSensor::Lidar => "LiDAR",
            BaselineSensor::Irs => "IRS",
            BaselineSensor::Uss => "USS",
        }
    }
}

/// Angular spacing of the USS arc points, degrees.
pub const USS_ARC_STEP_DEG: f64 = 1.0;

/// The momentary planar point set one sensor delivers at a frame.
pub fn sensor_baseline_points(frame: &SensorFrame, rig: &RigConfig, kind: BaselineSensor) -> Vec<[f64; 2]> {
    let h = rig.sensor_height;
    match kind {
        BaselineSensor::Lidar => {
            let pts: Vec<[f64; 3]> = frame.lidar.iter().map(|r| r.world_point(frame.pose, h)).collect();
            collapse_to_2d(&pts, h, COLLAPSE_BAND)
        }
        BaselineSensor::Irs => {
            let dirs = crate::simrig::irs_directions(&rig.irs);
            let mut pts = Vec::new();
            for (s, st) in frame.stacks.iter().enumerate() {
                let sp = rig.stack_pose(frame.pose, s);
                for (z, d) in st.irs.iter().zip(&dirs) {
                    if z.valid {
                        let w = sp.to_world(*d);
                        pts.push(std::array::from_fn(|a| sp.position[a] + z.range * w[a]));
                    }
                }
            }
            collapse_to_2d(&pts, h, COLLAPSE_BAND)
        }
        BaselineSensor::Uss => {
            let mut pts = Vec::new();
            for (s, st) in frame.stacks.iter().enumerate() {
                if let Some(r) = st.uss {
                    let sp = rig.stack_pose(frame.pose, s);
                    for a in uss_arc_angles(rig.uss.half_angle_deg) {
                        let d = sp.planar(a.to_radians());
                        pts.push([sp.position[0] + r * d[0], sp.position[1] + r * d[1]]);
                    }
                }
            }
            pts
        }
    }
}

/// Arc angles (degrees, left of forward) spanning exactly the cone.
pub fn uss_arc_angles(half_angle_deg: f64) -> Vec<f64> {
    let n = ((2.0 * half_angle_deg / USS_ARC_STEP_DEG).ceil() as usize).max(1);
    (0..=n).map(|k| -half_angle_deg + 2.0 * half_angle_deg * k as f64 / n as f64).collect()
}

/// Scan center for a test pose: robot position at sensor height.
pub fn scan_center(pose: PlanarPose, rig: &RigConfig) -> [f64; 3] {
    [pose.x, pose.y, rig.sensor_height]
}

/// Frame indices used as test poses: `count` evenly spaced frames.
pub fn test_frames(frame_count: usize, count: usize) -> Vec<usize> {
    let count = count.min(frame_count).max(1);
    (0..count).map(|k| (k * frame_count) / count + frame_count / (2 * count)).map(|i| i.min(frame_count - 1)).collect()
}

/// Zone-3 summary of one run, the unit of an ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    /// One `[acc mean, acc inlier %, cov mean, cov inlier %]` per seed.
    pub per_seed: Vec<[f64; 4]>,
    pub steps_per_sec: Vec<f64>,
}

pub const METRIC_NAMES: [&str; 4] = ["acc_mean_nnd_m", "acc_inlier_pct", "cov_mean_nnd_m", "cov_inlier_pct"];
/// Means are better when lower, inlier percentages when higher.
const LOWER_IS_BETTER: [bool; 4] = [true, false, true, false];

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl ArmResult {
    pub fn medians(&self) -> [f64; 4] {
        std::array::from_fn(|m| median(&self.per_seed.iter().map(|r| r[m]).collect::<Vec<_>>()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    Better,
    Worse,
    Tied,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseOrdering {
    pub a: String,
    pub b: String,
    pub metric: String,
    /// How `a` compares with `b`.
    pub ordering: Ordering,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
    pub orderings: Vec<PairwiseOrdering>,
}

pub fn compare_metric(a: f64, b: f64, metric: usize) -> Ordering {
    if a == b || (a.is_nan() && b.is_nan()) {
        return Ordering::Tied;
    }
    let a_better = if LOWER_IS_BETTER[metric] { a < b || b.is_nan() } else { a > b || b.is_nan() };
    if a_better {
        Ordering::Better
    } else {
        Ordering::Worse
    }
}

pub fn ablation_report(arms: Vec<ArmResult>) -> Result<AblationReport> {
    if arms.len() < 2 {
        return invalid("an ablation report needs at least two runs");
    }
    let mut orderings = Vec::new();
    for i in 0..arms.len() {
        for j in i + 1..arms.len() {
            let (ma, mb) = (arms[i].medians(), arms[j].medians());
            for m in 0..4 {
                orderings.push(PairwiseOrdering {
                    a: arms[i].name.clone(),
                    b: arms[j].name.clone(),
                    metric: METRIC_NAMES[m].into(),
                    ordering: compare_metric(ma[m], mb[m], m),
                });
            }
        }
    }
    Ok(AblationReport { arms, orderings })
}

impl AblationReport {
    pub fn ordering(&self, a: &str, b: &str, metric: usize) -> Option<Ordering> {
        self.orderings.iter().find_map(|o| {
            if o.metric != METRIC_NAMES[metric] {
                None
            } else if o.a == a && o.b == b {
                Some(o.ordering)
            } else if o.a == b && o.b == a {
                Some(match o.ordering {
                    Ordering::Better => Ordering::Worse,
                    Ordering::Worse => Ordering::Better,
                    Ordering::Tied => Ordering::Tied,
                })
            } else {
                None
            }
        })
    }

    /// Per-seed values and seed medians; timing is kept out so the file is
    /// reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,seed,");
        s.push_str(&METRIC_NAMES.join(","));
        s.push('\n');
        for arm in &self.arms {
            for (k, r) in arm.per_seed.iter().enumerate() {
                writeln!(s, "{},{k},{},{},{},{}", arm.name, r[0], r[1], r[2], r[3]).expect("string write");
            }
            let m = arm.medians();
            writeln!(s, "{},median,{},{},{},{}", arm.name, m[0], m[1], m[2], m[3]).expect("string write");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.arms.iter().map(|a| a.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!(
            "{:<width$}  {:>12}  {:>12}  {:>12}  {:>12}  {:>10}\n",
            "arm", "acc mean [m]", "acc inl [%]", "cov mean [m]", "cov inl [%]", "steps/s"
        );
        for arm in &self.arms {
            let m = arm.medians();
            writeln!(
                s,
                "{:<width$}  {:>12.3}  {:>12.1}  {:>12.3}  {:>12.1}  {:>10.2}",
                arm.name,
                m[0],
                m[1],
                m[2],
                m[3],
                median(&arm.steps_per_sec)
            )
            .expect("string write");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let medians: BTreeMap<&str, [f64; 4]> = self.arms.iter().map(|a| (a.name.as_str(), a.medians())).collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "metrics": METRIC_NAMES,
            "zone": 3,
            "medians": medians,
            "arms": self.arms,
            "orderings": self.orderings,
        }))?)
    }
}
