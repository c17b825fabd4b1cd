//! Probabilistic occupancy grid over the unit cube.
//!
//! Cells hold occupancy probabilities updated with the Bayesian rule from
//! two sources: projected field densities (NeRF-Update) and IRS depth rays
//! through an inverse sensor model (Depth-Update). Ray marching skips cells
//! below the occupancy threshold. [`DensityGrid`] is the density-valued
//! baseline grid that samples every cell during warm-up.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::codec_util::{read_f32s, read_u32};
use crate::error::{invalid, Error, Result};
use crate::scene::SceneFrame;
use crate::voxel;

/// Probabilities are kept in `[P_FLOOR, 1 - P_FLOOR]`.
pub const P_FLOOR: f64 = 1e-4;
pub const DEFAULT_RESOLUTION: usize = 128;

/// Bayesian update of one cell. `None` when both weighted likelihoods
/// vanish; the caller keeps the prior.
pub fn bayes_update(prior: f64, p_m_occ: f64, p_m_emp: f64) -> Option<f64> {
    let num = p_m_occ * prior;
    let den = num + p_m_emp * (1.0 - prior);
    if !(den > 0.0) {
        return None;
    }
    Some((num / den).clamp(P_FLOOR, 1.0 - P_FLOOR))
}

/// Maps a density in `[0, inf)` to a measurement likelihood in `[0, 1]`:
/// `1 / (1 + (sigma_t / sigma)^zeta)`.
pub fn project_density(sigma: f64, zeta: f64, sigma_t: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    if sigma.is_infinite() {
        return 1.0;
    }
    1.0 / (1.0 + (sigma_t / sigma).powf(zeta))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityProjectionParams {
    pub zeta: f64,
    pub sigma_t_max: f64,
    /// Running threshold, refreshed by every NeRF-Update.
    pub sigma_t: f64,
}

impl Default for DensityProjectionParams {
    fn default() -> Self {
        Self { zeta: 4.0, sigma_t_max: 10.0, sigma_t: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseSensorModelParams {
    pub p_occ: f64,
    pub p_emp: f64,
    pub thickness_cells: f64,
    /// Longest accepted range, in unit-cube lengths.
    pub max_range: f64,
}

impl Default for InverseSensorModelParams {
    fn default() -> Self {
        Self { p_occ: 0.7, p_emp: 0.35, thickness_cells: 1.0, max_range: f64::INFINITY }
    }
}

impl InverseSensorModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_occ > 0.5 && self.p_occ <= 1.0) || !(self.p_emp >= 0.0 && self.p_emp < 0.5) {
            return invalid(format!("inverse model needs 0.5 < p_occ <= 1 and 0 <= p_emp < 0.5, got {} / {}", self.p_occ, self.p_emp));
        }
        if !(self.thickness_cells >= 0.0) {
            return invalid("surface thickness must be non-negative");
        }
        Ok(())
    }
}

/// One IRS zone reading in unit-cube coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRay {
    pub direction: [f64; 3],
    pub depth: f64,
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCounters {
    pub nerf_updates: u64,
    pub depth_updates: u64,
    pub cell_updates: u64,
    pub anomalies: u64,
}

/// Cells visible to marching: anything that can answer occupancy queries.
pub trait Occupancy {
    fn resolution(&self) -> usize;
    fn cell_occupied(&self, index: usize) -> bool;

    /// Half-open binning; the upper cube faces fold into the last cell.
    /// Positions outside the cube are unoccupied.
    fn is_occupied(&self, p: [f64; 3]) -> bool {
        match cell_of(p, self.resolution()) {
            Some(c) => self.cell_occupied(linear(c, self.resolution())),
            None => false,
        }
    }
}

pub fn cell_of(p: [f64; 3], res: usize) -> Option<[usize; 3]> {
    let mut c = [0usize; 3];
    for a in 0..3 {
        if !(p[a] >= 0.0 && p[a] <= 1.0) {
            return None;
        }
        c[a] = ((p[a] * res as f64).floor() as usize).min(res - 1);
    }
    Some(c)
}

pub fn linear(c: [usize; 3], res: usize) -> usize {
    c[0] + res * (c[1] + res * c[2])
}

pub fn unlinear(i: usize, res: usize) -> [usize; 3] {
    [i % res, (i / res) % res, i / (res * res)]
}

pub fn cell_center(c: [usize; 3], res: usize) -> [f64; 3] {
    std::array::from_fn(|a| (c[a] as f64 + 0.5) / res as f64)
}

/// Inclusive cell-index box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CellBox {
    pub fn full(res: usize) -> Self {
        Self { lo: [0; 3], hi: [res - 1; 3] }
    }

    /// Cells intersecting the axis-aligned box `[lo, hi]` of the unit cube.
    pub fn covering(lo: [f64; 3], hi: [f64; 3], res: usize) -> Self {
        let f = |v: f64| ((v * res as f64).floor().max(0.0) as usize).min(res - 1);
        Self { lo: lo.map(f), hi: hi.map(f) }
    }

    pub fn count(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a] + 1).product()
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.lo[a] && c[a] <= self.hi[a])
    }

    fn random_cell(&self, rng: &mut impl Rng) -> [usize; 3] {
        std::array::from_fn(|a| rng.random_range(self.lo[a]..=self.hi[a]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NerfUpdateReport {
    pub sampled: usize,
    pub mean_sigma: f64,
    pub sigma_t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    resolution: usize,
    cells: Vec<f32>,
    pub threshold: f64,
    /// Region the uniform NeRF-Update samples are drawn from.
    pub active: CellBox,
    pub counters: GridCounters,
}

impl OccupancyGrid {
    /// Every cell starts at the uninformative prior 0.5.
    pub fn new(resolution: usize, threshold: f64) -> Result<Self> {
        if resolution == 0 {
            return invalid("grid resolution must be positive");
        }
        Ok(Self {
            resolution,
            cells: vec![0.5; resolution.pow(3)],
            threshold,
            active: CellBox::full(resolution),
            counters: GridCounters::default(),
        })
    }

    pub fn cells(&self) -> &[f32] {
        &self.cells
    }

    /// Rebuilds a grid from stored cell probabilities.
    pub fn from_cells(resolution: usize, cells: Vec<f32>, threshold: f64, active: CellBox, counters: GridCounters) -> Result<Self> {
        if resolution == 0 || cells.len() != resolution.pow(3) {
            return invalid(format!("{} cells do not fill a {resolution}^3 grid", cells.len()));
        }
        if active.hi.iter().any(|&h| h >= resolution) || (0..3).any(|a| active.lo[a] > active.hi[a]) {
            return invalid("active box outside the grid");
        }
        if cells.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return invalid("cell probability outside [0, 1]");
        }
        Ok(Self { resolution, cells, threshold, active, counters })
    }

    pub fn probability(&self, c: [usize; 3]) -> f64 {
        self.cells[linear(c, self.resolution)] as f64
    }

    pub fn set_probability(&mut self, c: [usize; 3], p: f64) {
        self.cells[linear(c, self.resolution)] = p.clamp(P_FLOOR, 1.0 - P_FLOOR) as f32;
    }

    pub fn cell_size(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    fn apply(&mut self, index: usize, p_m_occ: f64, p_m_emp: f64) {
        match bayes_update(self.cells[index] as f64, p_m_occ, p_m_emp) {
            Some(post) => {
                self.cells[index] = post as f32;
                self.counters.cell_updates += 1;
            }
            None => self.counters.anomalies += 1,
        }
    }

    pub fn occupied_cells(&self) -> Vec<usize> {
        let b = self.active;
        let mut out = Vec::new();
        for z in b.lo[2]..=b.hi[2] {
            for y in b.lo[1]..=b.hi[1] {
                for x in b.lo[0]..=b.hi[0] {
                    let i = linear([x, y, z], self.resolution);
                    if self.cell_occupied(i) {
                        out.push(i);
                    }
                }
            }
        }
        out
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_cells().len() as f64 / self.active.count() as f64
    }

    /// NeRF-Update: half the samples uniform over the active region, half
    /// from currently occupied cells. The density threshold follows the
    /// batch mean until it saturates at `sigma_t_max`.
    pub fn nerf_update(
        &mut self,
        mut query: impl FnMut(&[[f64; 3]]) -> Result<Vec<f64>>,
        sample_count: usize,
        params: &mut DensityProjectionParams,
        rng: &mut impl Rng,
    ) -> Result<NerfUpdateReport> {
        if sample_count == 0 {
            return Ok(NerfUpdateReport { sampled: 0, mean_sigma: 0.0, sigma_t: params.sigma_t });
        }
        let occupied = self.occupied_cells();
        let n_occ = if occupied.is_empty() { 0 } else { sample_count / 2 };
        let mut picks = Vec::with_capacity(sample_count);
        for _ in 0..sample_count - n_occ {
            picks.push(linear(self.active.random_cell(rng), self.resolution));
        }
        for _ in 0..n_occ {
            picks.push(occupied[rng.random_range(0..occupied.len())]);
        }
        let centers: Vec<[f64; 3]> = picks.iter().map(|&i| cell_center(unlinear(i, self.resolution), self.resolution)).collect();
        let sigmas = query(&centers)?;
        if sigmas.len() != picks.len() {
            return invalid("density query returned the wrong number of values");
        }
        let mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        params.sigma_t = params.sigma_t_max.min(mean).max(f64::MIN_POSITIVE);
        for (&i, &s) in picks.iter().zip(&sigmas) {
            let p = project_density(s, params.zeta, params.sigma_t);
            self.apply(i, p, 1.0 - p);
        }
        self.counters.nerf_updates += 1;
        Ok(NerfUpdateReport { sampled: picks.len(), mean_sigma: mean, sigma_t: params.sigma_t })
    }

    /// Depth-Update from IRS rays cast from `origin`. Cells whose ray
    /// interval ends before `depth - thickness` are updated as free, cells
    /// overlapping `[depth - thickness, depth + thickness]` as occupied, and
    /// nothing further along the ray is touched. Returns the number of cell
    /// updates.
    pub fn depth_update(&mut self, origin: [f64; 3], rays: &[DepthRay], model: &InverseSensorModelParams) -> Result<usize> {
        model.validate()?;
        let res = self.resolution;
        let th = model.thickness_cells * self.cell_size();
        let mut touched = Vec::new();
        for ray in rays {
            if !ray.valid || !(ray.depth > 0.0) || ray.depth > model.max_range {
                continue;
            }
            let far = ray.depth + th;
            let near = ray.depth - th;
            voxel::walk(origin, ray.direction, self.cell_size(), 0.0, far, |c, t0, t1| {
                if c.iter().any(|&v| v < 0 || v >= res as i64) {
                    // left the cube; nothing beyond can be inside again
                    return false;
                }
                if t1 <= t0 {
                    return true;
                }
                let idx = linear([c[0] as usize, c[1] as usize, c[2] as usize], res);
                if t1 < near {
                    touched.push((idx, false));
                } else if t0 <= far {
                    touched.push((idx, true));
                }
                true
            });
        }
        for &(idx, hit) in &touched {
            if hit {
                self.apply(idx, model.p_occ, 1.0 - model.p_occ);
            } else {
                self.apply(idx, model.p_emp, 1.0 - model.p_emp);
            }
        }
        self.counters.depth_updates += 1;
        Ok(touched.len())
    }

    /// Flat little-endian `f32` raster (x fastest) plus a JSON sidecar.
    pub fn export_raster(&self, bin_path: &Path, json_path: &Path, frame: &SceneFrame) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
        for v in &self.cells {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let lo = frame.to_world([0.0; 3]);
        let hi = frame.to_world([1.0; 3]);
        let meta = serde_json::json!({
            "resolution": self.resolution,
            "layout": "row-major, x fastest, little-endian f32",
            "bbox_min": lo,
            "bbox_max": hi,
            "threshold": self.threshold,
        });
        std::fs::write(json_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(&(self.resolution as u32).to_le_bytes())?;
        out.write_all(&self.threshold.to_le_bytes())?;
        for a in 0..3 {
            out.write_all(&(self.active.lo[a] as u32).to_le_bytes())?;
            out.write_all(&(self.active.hi[a] as u32).to_le_bytes())?;
        }
        let c = self.counters;
        for v in [c.nerf_updates, c.depth_updates, c.cell_updates, c.anomalies] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.cells {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let res = read_u32(r)? as usize;
        if res == 0 || res > 1024 {
            return Err(Error::Format(format!("implausible grid resolution {res}")));
        }
        let threshold = read_f64(r)?;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            lo[a] = read_u32(r)? as usize;
            hi[a] = read_u32(r)? as usize;
        }
        let mut counters = [0u64; 4];
        for c in counters.iter_mut() {
            *c = read_u64(r)?;
        }
        let cells = read_f32s(r, res.pow(3))?;
        Ok(Self {
            resolution: res,
            cells,
            threshold,
            active: CellBox { lo, hi },
            counters: GridCounters { nerf_updates: counters[0], depth_updates: counters[1], cell_updates: counters[2], anomalies: counters[3] },
        })
    }
}

impl Occupancy for OccupancyGrid {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn cell_occupied(&self, index: usize) -> bool {
        self.cells[index] as f64 >= self.threshold
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Density-valued grid in the style of the base method: every cell is
/// refreshed during warm-up, a random quarter afterwards, with exponential
/// decay of stale values. A cell is occupied when its value exceeds
/// `min(mean, cap)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    resolution: usize,
    values: Vec<f32>,
    pub decay: f64,
    pub cap: f64,
    pub warmup_steps: u64,
    mean: f64,
    pub updates: u64,
}

impl DensityGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return invalid("grid resolution must be positive");
        }
        // density whose optical depth over one default march step is 0.01
        let cap = 0.01 * 1024.0 / 3f64.sqrt();
        Ok(Self {
            resolution,
            values: vec![(2.0 * cap) as f32; resolution.pow(3)],
            decay: 0.95,
            cap,
            warmup_steps: 256,
            mean: 2.0 * cap,
            updates: 0,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Rebuilds a grid from stored values; the tunables keep their defaults.
    pub fn from_values(resolution: usize, values: Vec<f32>, mean: f64, updates: u64) -> Result<Self> {
        let mut g = Self::new(resolution)?;
        if values.len() != g.values.len() {
            return invalid(format!("{} values do not fill a {resolution}^3 grid", values.len()));
        }
        g.values = values;
        g.mean = mean;
        g.updates = updates;
        Ok(g)
    }

    pub fn threshold(&self) -> f64 {
        self.mean.min(self.cap)
    }

    /// Returns the number of cells whose density was queried.
    pub fn update(&mut self, step: u64, mut query: impl FnMut(&[[f64; 3]]) -> Result<Vec<f64>>, rng: &mut impl Rng) -> Result<usize> {
        let total = self.values.len();
        let picks: Vec<usize> = if step < self.warmup_steps {
            (0..total).collect()
        } else {
            (0..total / 4).map(|_| rng.random_range(0..total)).collect()
        };
        let mut fresh = vec![0f32; total];
        for chunk in picks.chunks(1 << 15) {
            let centers: Vec<[f64; 3]> = chunk.iter().map(|&i| cell_center(unlinear(i, self.resolution), self.resolution)).collect();
            let sigmas = query(&centers)?;
            for (&i, &s) in chunk.iter().zip(&sigmas) {
                fresh[i] = fresh[i].max(s as f32);
            }
        }
        let decay = self.decay as f32;
        let mut sum = 0.0f64;
        for (v, f) in self.values.iter_mut().zip(&fresh) {
            *v = (*v * decay).max(*f);
            sum += *v as f64;
        }
        self.mean = sum / total as f64;
        self.updates += 1;
        Ok(picks.len())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(&(self.resolution as u32).to_le_bytes())?;
        for v in [self.decay, self.cap, self.mean] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.warmup_steps.to_le_bytes())?;
        out.write_all(&self.updates.to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let res = read_u32(r)? as usize;
        if res == 0 || res > 1024 {
            return Err(Error::Format(format!("implausible grid resolution {res}")));
        }
        let decay = read_f64(r)?;
        let cap = read_f64(r)?;
        let mean = read_f64(r)?;
        let warmup_steps = read_u64(r)?;
        let updates = read_u64(r)?;
        let values = read_f32s(r, res.pow(3))?;
        Ok(Self { resolution: res, values, decay, cap, warmup_steps, mean, updates })
    }
}

impl Occupancy for DensityGrid {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn cell_occupied(&self, index: usize) -> bool {
        self.values[index] as f64 > self.threshold()
    }
}

/// The grid driving ray skipping in a run.
#[derive(Clone, Debug, PartialEq)]
pub enum SkipGrid {
    Virus(OccupancyGrid),
    InstantNgp(DensityGrid),
    /// Every cell occupied: marching never skips.
    Disabled(usize),
}

impl Occupancy for SkipGrid {
    fn resolution(&self) -> usize {
        match self {
            SkipGrid::Virus(g) => g.resolution(),
            SkipGrid::InstantNgp(g) => g.resolution(),
            SkipGrid::Disabled(r) => *r,
        }
    }

    fn cell_occupied(&self, index: usize) -> bool {
        match self {
            SkipGrid::Virus(g) => g.cell_occupied(index),
            SkipGrid::InstantNgp(g) => g.cell_occupied(index),
            SkipGrid::Disabled(_) => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uninformative_measurement_keeps_prior() {
        for prior in [0.1, 0.5, 0.83] {
            let post = bayes_update(prior, 0.4, 0.4).unwrap();
            assert!((post - prior).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_update() {
        // 0.7 * 0.5 / (0.7 * 0.5 + 0.3 * 0.5)
        assert!((bayes_update(0.5, 0.7, 0.3).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(bayes_update(0.5, 0.0, 0.0), None);
    }

    #[test]
    fn repeated_updates_climb_to_the_clamp() {
        let mut p = 0.5;
        let mut prev = p;
        for _ in 0..40 {
            p = bayes_update(p, 0.8, 0.2).unwrap();
            assert!(p >= prev);
            prev = p;
        }
        assert_eq!(p, 1.0 - P_FLOOR);
        let mut q = 0.5;
        for _ in 0..40 {
            q = bayes_update(q, 0.2, 0.8).unwrap();
        }
        assert_eq!(q, P_FLOOR);
    }

    #[test]
    fn projection_values() {
        assert_eq!(project_density(10.0, 4.0, 10.0), 0.5);
        assert_eq!(project_density(0.0, 4.0, 10.0), 0.0);
        assert_eq!(project_density(f64::INFINITY, 4.0, 10.0), 1.0);
        assert!(project_density(1e12, 4.0, 10.0) > 1.0 - 1e-12);
        assert!((project_density(30.0, 1.0, 10.0) - 0.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn projection_monotone_and_scale_covariant(a in 1e-3f64..1e3, b in 1e-3f64..1e3, st in 0.1f64..50.0, zeta in 0.5f64..8.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(project_density(lo, zeta, st) <= project_density(hi, zeta, st));
            let p = project_density(a, zeta, st);
            let q = project_density(a / st, zeta, 1.0);
            prop_assert!((p - q).abs() < 1e-12);
        }

        #[test]
        fn update_order_does_not_matter(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // total log-odds excursion stays inside the clamp band
            let mut updates: Vec<(f64, f64)> = (0..6).map(|_| {
                let p: f64 = rng.random_range(0.2..0.8);
                (p, 1.0 - p)
            }).collect();
            let run = |u: &[(f64, f64)]| u.iter().fold(0.5, |acc, &(o, e)| bayes_update(acc, o, e).unwrap());
            let base = run(&updates);
            for _ in 0..5 {
                updates.shuffle(&mut rng);
                prop_assert!((run(&updates) - base).abs() < 1e-9);
            }
        }

        #[test]
        fn posterior_stays_in_band(prior in 0.0f64..=1.0, o in 0.0f64..=1.0, e in 0.0f64..=1.0) {
            if let Some(p) = bayes_update(prior, o, e) {
                prop_assert!((P_FLOOR..=1.0 - P_FLOOR).contains(&p));
            }
        }
    }

    #[test]
    fn fresh_grid_is_conservatively_occupied() {
        let g = OccupancyGrid::new(8, 0.5).unwrap();
        for p in [[0.0, 0.0, 0.0], [0.5, 0.2, 0.9], [1.0, 1.0, 1.0]] {
            assert!(g.is_occupied(p));
        }
        assert!(!g.is_occupied([1.2, 0.5, 0.5]));
    }

    #[test]
    fn floor_cell_is_free() {
        let mut g = OccupancyGrid::new(8, 0.5).unwrap();
        g.set_probability([1, 2, 3], 0.0);
        assert!(!g.is_occupied(cell_center([1, 2, 3], 8)));
    }

    #[test]
    fn boundary_points_bin_once() {
        let res = 8;
        // lattice of points on cell boundaries: each maps to the cell on its upper side
        for i in 0..=res {
            let v = i as f64 / res as f64;
            let c = cell_of([v, v, v], res).unwrap();
            let want = i.min(res - 1);
            assert_eq!(c, [want; 3]);
            let count = (0..res).filter(|&k| {
                let lo = k as f64 / res as f64;
                let hi = (k + 1) as f64 / res as f64;
                (v >= lo && v < hi) || (k == res - 1 && v == 1.0)
            }).count();
            assert_eq!(count, 1);
        }
    }

    fn uniform_query(s: f64) -> impl FnMut(&[[f64; 3]]) -> Result<Vec<f64>> {
        move |p: &[[f64; 3]]| Ok(vec![s; p.len()])
    }

    #[test]
    fn saturated_uniform_density_is_uninformative() {
        let mut g = OccupancyGrid::new(16, 0.5).unwrap();
        let mut params = DensityProjectionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = g.nerf_update(uniform_query(10.0), 1024, &mut params, &mut rng).unwrap();
        assert_eq!(rep.sigma_t, 10.0);
        assert!(g.cells().iter().all(|&c| c == 0.5));
    }

    #[test]
    fn sigma_t_tracks_small_densities_then_saturates() {
        let mut g = OccupancyGrid::new(16, 0.5).unwrap();
        let mut params = DensityProjectionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // early training: tiny densities, threshold follows the batch mean
        let rep = g
            .nerf_update(|p: &[[f64; 3]]| Ok(p.iter().map(|c| 0.01 + 0.02 * c[0]).collect()), 512, &mut params, &mut rng)
            .unwrap();
        assert!(rep.sigma_t < 0.05 && (rep.sigma_t - rep.mean_sigma).abs() < 1e-15);
        // the update is informative: cells with above-mean density gain probability
        assert!(g.cells().iter().any(|&c| c > 0.5) && g.cells().iter().any(|&c| c < 0.5));
        let rep = g.nerf_update(uniform_query(500.0), 512, &mut params, &mut rng).unwrap();
        assert_eq!(rep.sigma_t, 10.0);
    }

    #[test]
    fn nerf_update_samples_occupied_half() {
        let mut g = OccupancyGrid::new(16, 0.5).unwrap();
        for i in 0..g.cells.len() {
            g.cells[i] = 0.1;
        }
        g.set_probability([3, 3, 3], 0.9);
        let mut params = DensityProjectionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hits = 0;
        g.nerf_update(
            |p: &[[f64; 3]]| {
                hits = p.iter().filter(|c| **c == cell_center([3, 3, 3], 16)).count();
                Ok(vec![1.0; p.len()])
            },
            100,
            &mut params,
            &mut rng,
        )
        .unwrap();
        assert!(hits >= 50);
    }

    // Exhaustive oracle: classify every cell from its analytic slab interval.
    fn oracle_depth_update(res: usize, origin: [f64; 3], ray: &DepthRay, model: &InverseSensorModelParams) -> Vec<Option<bool>> {
        let th = model.thickness_cells / res as f64;
        let mut out = vec![None; res.pow(3)];
        for i in 0..res.pow(3) {
            let c = unlinear(i, res);
            let lo = c.map(|v| v as f64 / res as f64);
            let hi = c.map(|v| (v + 1) as f64 / res as f64);
            if let Some((a, b)) = crate::scene::ray_box(origin, ray.direction, lo, hi) {
                let (a, b) = (a.max(0.0), b.min(ray.depth + th));
                if b <= a {
                    continue;
                }
                out[i] = Some(b >= ray.depth - th);
            }
        }
        out
    }

    #[test]
    fn single_ray_matches_voxel_oracle() {
        let res = 32;
        let frame_side = 8.0; // 2 m depth in an 8 m cube
        let origin = [0.21, 0.33, 0.47];
        let d = [0.8, 0.55, 0.12];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
        let dir = d.map(|v| v / n.sqrt());
        let ray = DepthRay { direction: dir, depth: 2.0 / frame_side, valid: true };
        let model = InverseSensorModelParams::default();
        let mut g = OccupancyGrid::new(res, 0.5).unwrap();
        g.depth_update(origin, &[ray], &model).unwrap();
        let want = oracle_depth_update(res, origin, &ray, &model);
        let mut free = 0;
        let mut hit = 0;
        for (i, w) in want.iter().enumerate() {
            let p = g.cells[i] as f64;
            match w {
                None => assert_eq!(p, 0.5),
                Some(false) => {
                    free += 1;
                    assert!((p - 0.35).abs() < 1e-6, "cell {i} should be free, got {p}");
                }
                Some(true) => {
                    hit += 1;
                    assert!((p - 0.7).abs() < 1e-6, "cell {i} should be hit, got {p}");
                }
            }
        }
        assert!(free > 5 && hit >= 2);
    }

    #[test]
    fn invalid_rays_change_nothing() {
        let mut g = OccupancyGrid::new(16, 0.5).unwrap();
        let before = g.clone();
        let rays = [DepthRay { direction: [1.0, 0.0, 0.0], depth: 0.2, valid: false }; 4];
        g.depth_update([0.5; 3], &rays, &InverseSensorModelParams::default()).unwrap();
        assert_eq!(g.cells, before.cells);
    }

    #[test]
    fn nothing_beyond_the_surface_band_changes() {
        let mut g = OccupancyGrid::new(32, 0.5).unwrap();
        let ray = DepthRay { direction: [1.0, 0.0, 0.0], depth: 0.25, valid: true };
        g.depth_update([0.1, 0.51, 0.52], &[ray], &InverseSensorModelParams::default()).unwrap();
        let limit = 0.1 + 0.25 + 1.0 / 32.0;
        for i in 0..g.cells.len() {
            let c = unlinear(i, 32);
            if (c[0] as f64) / 32.0 > limit {
                assert_eq!(g.cells[i], 0.5);
            }
        }
    }

    #[test]
    fn consistent_hits_cross_threshold_quickly() {
        let mut g = OccupancyGrid::new(32, 0.5).unwrap();
        let origin = [0.1, 0.51, 0.52];
        let model = InverseSensorModelParams::default();
        let target = cell_of([0.1 + 0.3, 0.51, 0.52], 32).unwrap();
        // start from a cell that an earlier pass marked free three times
        g.set_probability(target, 0.5);
        for _ in 0..3 {
            let p = g.probability(target);
            g.set_probability(target, bayes_update(p, model.p_emp, 1.0 - model.p_emp).unwrap());
        }
        let ray = DepthRay { direction: [1.0, 0.0, 0.0], depth: 0.3, valid: true };
        let mut n = 0;
        while g.probability(target) < g.threshold {
            g.depth_update(origin, &[ray], &model).unwrap();
            n += 1;
            assert!(n <= 5);
        }
        assert_eq!(n, 3);
    }

    #[test]
    fn density_grid_schedule() {
        let mut g = DensityGrid::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let half = |p: &[[f64; 3]]| Ok(p.iter().map(|c| if c[0] < 0.5 { 100.0 } else { 0.01 }).collect());
        let n = g.update(0, half, &mut rng).unwrap();
        assert_eq!(n, 512);
        // the optimistic initial value still marks everything occupied
        assert!(g.is_occupied([0.8, 0.5, 0.5]));
        // 0.95^k * 2 cap falls below cap after 14 decays
        for step in 1..14 {
            g.update(step, half, &mut rng).unwrap();
        }
        assert!(g.is_occupied([0.2, 0.5, 0.5]));
        assert!(!g.is_occupied([0.8, 0.5, 0.5]));
        let n = g.update(300, |p: &[[f64; 3]]| Ok(vec![0.0; p.len()]), &mut rng).unwrap();
        assert_eq!(n, 128);
    }

    #[test]
    fn grid_serialization_round_trip() {
        let mut g = OccupancyGrid::new(8, 0.5).unwrap();
        g.set_probability([1, 1, 1], 0.9);
        g.counters.anomalies = 3;
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let h = OccupancyGrid::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(g, h);
        let d = DensityGrid::new(4).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(DensityGrid::read_from(&mut buf.as_slice()).unwrap(), d);
    }
}
