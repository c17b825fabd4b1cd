//! Occupancy-accelerated ray marching and volume rendering of color and
//! depth.
//!
//! Depth is the unnormalized weighted sum of sample depths, so a ray that
//! does not saturate renders short. Empty rays composite to a black
//! background and report no return.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{ColorPass, DensityPass, FieldGrads, RadianceField};
use crate::occgrid::Occupancy;
use crate::real::Real;
use crate::scene::{ray_box, SceneFrame};

pub const MAX_SAMPLES: usize = 1024;

/// Unit-cube diagonal over 1024.
pub fn default_step() -> f64 {
    3f64.sqrt() / 1024.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], t_near: f64, t_far: f64) -> Result<Self> {
        let n = norm(direction);
        if !((n - 1.0).abs() <= 1e-9) {
            return invalid(format!("ray direction norm {n} is not unit"));
        }
        if !(t_near < t_far) {
            return invalid(format!("empty ray interval [{t_near}, {t_far}]"));
        }
        Ok(Self { origin, direction, t_near, t_far })
    }

    /// The part of `origin + t * direction`, `t` in `[0, t_max]`, inside the
    /// box `[lo, hi]`. `None` when the ray misses it.
    pub fn clipped(origin: [f64; 3], direction: [f64; 3], t_max: f64, lo: [f64; 3], hi: [f64; 3]) -> Option<Self> {
        let (a, b) = ray_box(origin, direction, lo, hi)?;
        let (a, b) = (a.max(0.0), b.min(t_max));
        Ray::new(origin, direction, a, b).ok()
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + t * self.direction[a])
    }
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    v.map(|x| x / n)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub direction: [f64; 3],
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Fixed-step samples at `t_near + (k + offset) * step` that land in
/// occupied cells. Spacing is the gap to the next kept sample, capped at
/// `step` so a sample in front of a skipped stretch does not absorb it.
pub fn march_ray_offset(ray: &Ray, grid: &impl Occupancy, step: f64, max_samples: usize, offset: f64) -> RaySamples {
    let mut s = RaySamples { direction: ray.direction, ..Default::default() };
    let count = ((ray.t_far - ray.t_near) / step).floor() as usize;
    for k in 0..count {
        if s.depths.len() == max_samples {
            break;
        }
        let t = ray.t_near + (k as f64 + offset) * step;
        let p = ray.at(t);
        if grid.is_occupied(p) {
            s.depths.push(t);
            s.positions.push(p);
        }
    }
    let m = s.depths.len();
    s.deltas = (0..m).map(|j| if j + 1 < m { (s.depths[j + 1] - s.depths[j]).min(step) } else { step }).collect();
    s
}

/// Samples at the centers of the `floor((t_far - t_near) / step)` steps.
pub fn march_ray(ray: &Ray, grid: &impl Occupancy, step: f64, max_samples: usize) -> RaySamples {
    march_ray_offset(ray, grid, step, max_samples, 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub color: [T; 3],
    pub depth: T,
    pub weights: Vec<T>,
    /// Transmittance in front of each sample.
    pub transmittance: Vec<T>,
    pub final_transmittance: T,
}

impl<T: Real> Composite<T> {
    pub fn opacity(&self) -> T {
        T::one() - self.final_transmittance
    }
}

/// Alpha compositing of per-sample colors and depths over a black
/// background.
pub fn composite<T: Real>(sigma: &[T], deltas: &[T], rgb: &[[T; 3]], depths: &[T]) -> Composite<T> {
    let m = sigma.len();
    let mut weights = Vec::with_capacity(m);
    let mut trans = Vec::with_capacity(m);
    let mut color = [T::zero(); 3];
    let mut depth = T::zero();
    let mut optical = T::zero();
    for j in 0..m {
        let tj = (-optical).exp();
        let tau = sigma[j] * deltas[j];
        // T_j (1 - e^{-tau}) with the cancellation-free expm1
        let w = tj * -((-tau).exp_m1());
        trans.push(tj);
        weights.push(w);
        for c in 0..3 {
            color[c] += w * rgb[j][c];
        }
        depth += w * depths[j];
        optical += tau;
    }
    Composite { color, depth, weights, transmittance: trans, final_transmittance: (-optical).exp() }
}

/// Gradients of `g_color . color + g_depth * depth` with respect to each
/// sample density and color.
pub fn composite_backward<T: Real>(
    sigma: &[T],
    deltas: &[T],
    rgb: &[[T; 3]],
    depths: &[T],
    comp: &Composite<T>,
    g_color: [T; 3],
    g_depth: T,
) -> (Vec<T>, Vec<[T; 3]>) {
    let m = sigma.len();
    let mut dsigma = vec![T::zero(); m];
    let mut drgb = vec![[T::zero(); 3]; m];
    // suffix sums of weighted (g . c + g_d d) over later samples
    let mut behind = T::zero();
    for j in (0..m).rev() {
        let w = comp.weights[j];
        let x = g_color[0] * rgb[j][0] + g_color[1] * rgb[j][1] + g_color[2] * rgb[j][2] + g_depth * depths[j];
        let t_next = comp.transmittance[j] * (-(sigma[j] * deltas[j])).exp();
        dsigma[j] = deltas[j] * (t_next * x - behind);
        drgb[j] = g_color.map(|g| g * w);
        behind += w * x;
    }
    (dsigma, drgb)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub step: f64,
    pub max_samples: usize,
    /// Samples behind a transmittance below this are dropped; 0 keeps all.
    pub early_stop: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { step: default_step(), max_samples: MAX_SAMPLES, early_stop: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayRender<T> {
    pub color: [T; 3],
    /// Unit-cube lengths, unnormalized.
    pub depth: T,
    pub opacity: T,
    pub samples: usize,
}

/// What the batch backward pass needs.
#[derive(Clone, Debug)]
pub struct BatchTape<T> {
    dens: DensityPass<T>,
    color: ColorPass<T>,
    /// Kept (composited) samples of each ray, as rows of both passes.
    spans: Vec<Range<usize>>,
    deltas: Vec<T>,
    depths: Vec<T>,
    composites: Vec<Composite<T>>,
}

impl<T> BatchTape<T> {
    pub fn sample_count(&self) -> usize {
        self.deltas.len()
    }
}

/// Marches, queries the field once for all samples, truncates each ray at
/// the early-stop transmittance, shades only the surviving samples and
/// composites. `offsets` jitters the sample phase per ray.
pub fn render_batch<T: Real>(
    field: &RadianceField<T>,
    grid: &impl Occupancy,
    rays: &[Ray],
    opts: &RenderOptions,
    offsets: Option<&[f64]>,
) -> Result<(Vec<RayRender<T>>, BatchTape<T>)> {
    if let Some(o) = offsets {
        if o.len() != rays.len() {
            return invalid("one march offset per ray required");
        }
    }
    let marched: Vec<RaySamples> = rays
        .iter()
        .enumerate()
        .map(|(i, r)| march_ray_offset(r, grid, opts.step, opts.max_samples, offsets.map_or(0.5, |o| o[i])))
        .collect();
    let positions: Vec<[T; 3]> = marched.iter().flat_map(|s| s.positions.iter().map(|p| p.map(T::lit))).collect();
    let dens = field.density_pass(&positions)?;

    let mut keep = Vec::new();
    let mut dirs = Vec::new();
    let mut spans = Vec::with_capacity(rays.len());
    let mut deltas = Vec::new();
    let mut depths = Vec::new();
    let mut base = 0;
    let stop = T::lit(opts.early_stop);
    for s in &marched {
        let start = keep.len();
        let mut optical = T::zero();
        let dir = s.direction.map(T::lit);
        for j in 0..s.len() {
            if opts.early_stop > 0.0 && (-optical).exp() < stop {
                break;
            }
            let d = T::lit(s.deltas[j]);
            optical += dens.sigma[base + j] * d;
            keep.push(base + j);
            dirs.push(dir);
            deltas.push(d);
            depths.push(T::lit(s.depths[j]));
        }
        spans.push(start..keep.len());
        base += s.len();
    }
    let color = field.color_pass(&dens, keep, &dirs)?;
    let mut out = Vec::with_capacity(rays.len());
    let mut composites = Vec::with_capacity(rays.len());
    for span in &spans {
        let sig: Vec<T> = color.keep[span.clone()].iter().map(|&i| dens.sigma[i]).collect();
        let c = composite(&sig, &deltas[span.clone()], &color.rgb[span.clone()], &depths[span.clone()]);
        out.push(RayRender { color: c.color, depth: c.depth, opacity: c.opacity(), samples: span.len() });
        composites.push(c);
    }
    Ok((out, BatchTape { dens, color, spans, deltas, depths, composites }))
}

/// Accumulates field gradients for per-ray `dL/dcolor` and `dL/ddepth`.
pub fn render_batch_backward<T: Real>(
    field: &RadianceField<T>,
    tape: &BatchTape<T>,
    g_color: &[[T; 3]],
    g_depth: &[T],
    grads: &mut FieldGrads<T>,
) -> Result<()> {
    if g_color.len() != tape.spans.len() || g_depth.len() != tape.spans.len() {
        return invalid("one gradient per rendered ray required");
    }
    let mut dsigma = vec![T::zero(); tape.dens.sigma.len()];
    let mut drgb = vec![[T::zero(); 3]; tape.color.keep.len()];
    for (r, span) in tape.spans.iter().enumerate() {
        let sig: Vec<T> = tape.color.keep[span.clone()].iter().map(|&i| tape.dens.sigma[i]).collect();
        let (ds, dc) = composite_backward(
            &sig,
            &tape.deltas[span.clone()],
            &tape.color.rgb[span.clone()],
            &tape.depths[span.clone()],
            &tape.composites[r],
            g_color[r],
            g_depth[r],
        );
        for (k, i) in span.clone().enumerate() {
            dsigma[tape.color.keep[i]] = ds[k];
            drgb[i] = dc[k];
        }
    }
    field.backward(&tape.dens, Some((&tape.color, &drgb)), &dsigma, grads)
}

/// Planar 360 degree range scan. Azimuths are world-frame degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthScan {
    /// World position of the scan center.
    pub position: [f64; 3],
    pub angular_step_deg: f64,
    pub azimuths_deg: Vec<f64>,
    /// Meters; `None` for no return.
    pub depths: Vec<Option<f64>>,
}

impl DepthScan {
    pub fn azimuths(angular_step_deg: f64) -> Result<Vec<f64>> {
        if !(angular_step_deg > 0.0 && angular_step_deg <= 360.0) {
            return invalid(format!("angular step {angular_step_deg} outside (0, 360]"));
        }
        let n = (360.0 / angular_step_deg - 1e-9).ceil() as usize;
        Ok((0..n).map(|k| k as f64 * angular_step_deg).collect())
    }

    pub fn len(&self) -> usize {
        self.azimuths_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.azimuths_deg.is_empty()
    }

    /// World-frame planar hit points of the valid returns.
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.azimuths_deg
            .iter()
            .zip(&self.depths)
            .filter_map(|(a, d)| {
                let d = (*d)?;
                let r = a.to_radians();
                Some([self.position[0] + d * r.cos(), self.position[1] + d * r.sin()])
            })
            .collect()
    }

    /// `azimuth_deg,depth_m,valid`; a missing return is written as depth 0.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("azimuth_deg,depth_m,valid\n");
        for (a, d) in self.azimuths_deg.iter().zip(&self.depths) {
            match d {
                Some(d) => s.push_str(&format!("{a},{d},1\n")),
                None => s.push_str(&format!("{a},0,0\n")),
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Rays with less accumulated opacity than this report no return.
pub const MIN_SCAN_OPACITY: f64 = 1e-3;

/// Renders one horizontal ray per azimuth from `position` (world meters).
pub fn render_scan<T: Real>(
    field: &RadianceField<T>,
    grid: &impl Occupancy,
    frame: &SceneFrame,
    position: [f64; 3],
    angular_step_deg: f64,
    opts: &RenderOptions,
) -> Result<DepthScan> {
    let azimuths = DepthScan::azimuths(angular_step_deg)?;
    let origin = frame.to_unit(position);
    let rays: Vec<Option<Ray>> = azimuths
        .iter()
        .map(|a| {
            let r = a.to_radians();
            Ray::clipped(origin, [r.cos(), r.sin(), 0.0], f64::INFINITY, [0.0; 3], [1.0; 3])
        })
        .collect();
    let live: Vec<Ray> = rays.iter().flatten().copied().collect();
    let mut depths = vec![None; azimuths.len()];
    let mut rendered = Vec::with_capacity(live.len());
    // bounded batches keep the tape small
    for chunk in live.chunks(64) {
        rendered.extend(render_batch(field, grid, chunk, opts, None)?.0);
    }
    let mut it = rendered.into_iter();
    for (k, r) in rays.iter().enumerate() {
        if r.is_some() {
            let out = it.next().expect("one render per live ray");
            if out.samples > 0 && out.opacity.f64() >= MIN_SCAN_OPACITY {
                depths[k] = Some(frame.to_world_len(out.depth.f64()));
            }
        }
    }
    Ok(DepthScan { position, angular_step_deg, azimuths_deg: azimuths, depths })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderingBias {
    /// Unnormalized rendered depth.
    pub rendered: f64,
    /// Rendered depth divided by the accumulated weight.
    pub normalized: f64,
    pub center: f64,
}

/// Renders the depth of a density profile sampled at `depths` and reports
/// it next to the profile center.
pub fn measure_rendering_bias(depths: &[f64], sigma: &[f64], center: f64) -> Result<RenderingBias> {
    if depths.len() != sigma.len() || depths.is_empty() {
        return invalid("profile needs matching non-empty depths and densities");
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return invalid("densities must be non-negative");
    }
    let deltas: Vec<f64> = (0..depths.len())
        .map(|j| if j + 1 < depths.len() { depths[j + 1] - depths[j] } else if j > 0 { depths[j] - depths[j - 1] } else { 1.0 })
        .collect();
    let rgb = vec![[0.0; 3]; depths.len()];
    let c = composite(sigma, &deltas, &rgb, depths);
    let mass: f64 = c.weights.iter().sum();
    Ok(RenderingBias { rendered: c.depth, normalized: if mass > 0.0 { c.depth / mass } else { 0.0 }, center })
}

/// Gaussian density bump sampled on a uniform grid over `[t0, t1]`.
pub fn gaussian_profile(center: f64, std: f64, peak: f64, t0: f64, t1: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (t1 - t0) / (n - 1) as f64;
    let d: Vec<f64> = (0..n).map(|k| t0 + k as f64 * h).collect();
    let s = d.iter().map(|t| peak * (-0.5 * ((t - center) / std).powi(2)).exp()).collect();
    (d, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::hashenc::HashGridConfig;
    use crate::occgrid::OccupancyGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_ray() -> Ray {
        Ray::new([0.0, 0.5, 0.5], [1.0, 0.0, 0.0], 0.0, 1.0).unwrap()
    }

    #[test]
    fn fresh_grid_gives_dense_samples() {
        let g = OccupancyGrid::new(16, 0.5).unwrap();
        let step = 0.013;
        let s = march_ray(&axis_ray(), &g, step, MAX_SAMPLES);
        assert_eq!(s.len(), (1.0f64 / step).floor() as usize);
        assert!(s.deltas.iter().all(|&d| (d - step).abs() < 1e-12));
        assert!(s.depths.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn empty_grid_gives_no_samples() {
        let mut g = OccupancyGrid::new(8, 0.5).unwrap();
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    g.set_probability([x, y, z], 0.1);
                }
            }
        }
        assert!(march_ray(&axis_ray(), &g, 0.01, MAX_SAMPLES).is_empty());
    }

    #[test]
    fn slab_grid_samples_only_inside_slab() {
        let res = 16;
        let mut g = OccupancyGrid::new(res, 0.5).unwrap();
        for x in 0..res {
            for y in 0..res {
                for z in 0..res {
                    g.set_probability([x, y, z], if (5..8).contains(&x) { 0.9 } else { 0.1 });
                }
            }
        }
        let ray = Ray::new([0.02, 0.1, 0.2], normalize([1.0, 0.4, 0.3]), 0.0, 1.1).unwrap();
        let step = 0.004;
        let s = march_ray(&ray, &g, step, MAX_SAMPLES);
        // oracle: every step center whose containing cell lies in the slab
        let mut want = Vec::new();
        let count = ((ray.t_far - ray.t_near) / step).floor() as usize;
        for k in 0..count {
            let t = ray.t_near + (k as f64 + 0.5) * step;
            let p = ray.at(t);
            if p.iter().all(|v| (0.0..=1.0).contains(v)) {
                let cx = ((p[0] * res as f64).floor() as usize).min(res - 1);
                if (5..8).contains(&cx) {
                    want.push(t);
                }
            }
        }
        assert!(!want.is_empty());
        assert_eq!(s.depths, want);
        assert_eq!(*s.deltas.last().unwrap(), step);
    }

    #[test]
    fn sample_cap() {
        let g = OccupancyGrid::new(4, 0.5).unwrap();
        assert_eq!(march_ray(&axis_ray(), &g, 1e-4, 100).len(), 100);
    }

    #[test]
    fn empty_space_composite() {
        let c = composite(&[0.0; 4], &[0.1; 4], &[[1.0; 3]; 4], &[0.1, 0.2, 0.3, 0.4]);
        assert!(c.weights.iter().all(|&w| w == 0.0));
        assert_eq!(c.final_transmittance, 1.0);
        assert_eq!(c.color, [0.0; 3]);
        assert_eq!(c.depth, 0.0);
    }

    #[test]
    fn opaque_single_sample() {
        let c = composite::<f64>(&[200.0], &[0.1], &[[0.2, 0.4, 0.6]], &[0.7]);
        assert!((c.weights[0] - 1.0).abs() < 1e-8);
        assert!((c.depth - 0.7).abs() < 1e-8);
        assert!((c.color[1] - 0.4).abs() < 1e-8);
    }

    #[test]
    fn two_sample_closed_form() {
        let c = composite(&[2f64.ln(), 20.0], &[1.0, 1.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[0.3, 0.5]);
        assert!((c.weights[0] - 0.5).abs() < 1e-12);
        assert!((c.weights[1] - 0.5).abs() < 1e-8);
        assert!((c.depth - 0.4).abs() < 1e-8);
    }

    fn random_profile(rng: &mut ChaCha8Rng, m: usize) -> (Vec<f64>, Vec<f64>, Vec<[f64; 3]>, Vec<f64>) {
        let sigma = (0..m).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..40.0) }).collect();
        let deltas = (0..m).map(|_| rng.random_range(0.001..0.05)).collect();
        let rgb = (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut t = 0.0;
        let depths = (0..m)
            .map(|_| {
                t += rng.random_range(0.001..0.05);
                t
            })
            .collect();
        (sigma, deltas, rgb, depths)
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let m = rng.random_range(1..12);
            let (sigma, deltas, rgb, depths) = random_profile(&mut rng, m);
            let gc = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let gd = rng.random_range(-1.0..1.0);
            let objective = |s: &[f64], c: &[[f64; 3]]| {
                let r = composite(s, &deltas, c, &depths);
                gc[0] * r.color[0] + gc[1] * r.color[1] + gc[2] * r.color[2] + gd * r.depth
            };
            let comp = composite(&sigma, &deltas, &rgb, &depths);
            let (ds, dc) = composite_backward(&sigma, &deltas, &rgb, &depths, &comp, gc, gd);
            let h = 1e-6;
            for j in 0..m {
                let mut p = sigma.clone();
                let mut q = sigma.clone();
                p[j] += h;
                q[j] -= h;
                let fd = (objective(&p, &rgb) - objective(&q, &rgb)) / (2.0 * h);
                assert!((fd - ds[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "sigma {j}: {fd} vs {}", ds[j]);
                for c in 0..3 {
                    let mut p = rgb.clone();
                    let mut q = rgb.clone();
                    p[j][c] += h;
                    q[j][c] -= h;
                    let fd = (objective(&sigma, &p) - objective(&sigma, &q)) / (2.0 * h);
                    assert!((fd - dc[j][c]).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn transmittance_non_increasing_and_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (sigma, deltas, rgb, depths) = random_profile(&mut rng, 30);
            let c = composite(&sigma, &deltas, &rgb, &depths);
            assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
            let total: f64 = c.weights.iter().sum::<f64>() + c.final_transmittance;
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_profile_renders_at_center() {
        let b = measure_rendering_bias(&[0.3, 0.5, 0.7], &[0.0, 1e6, 0.0], 0.5).unwrap();
        assert_eq!(b.rendered, 0.5);
    }

    #[test]
    fn gaussian_profile_renders_short() {
        let (d, s) = gaussian_profile(0.5, 0.05, 50.0, 0.0, 1.0, 2001);
        let b = measure_rendering_bias(&d, &s, 0.5).unwrap();
        assert!(b.rendered < 0.5 && b.normalized < 0.5);
    }

    #[test]
    fn bias_grows_with_peak() {
        // coarse rendering against a fine quadrature of the same integral
        let mut last = 0.0;
        for peak in [5.0, 20.0, 80.0, 320.0] {
            let (d, s) = gaussian_profile(0.5, 0.05, peak, 0.0, 1.0, 10_001);
            let fine = measure_rendering_bias(&d, &s, 0.5).unwrap();
            let bias = 0.5 - fine.normalized;
            assert!(bias > last, "peak {peak}: bias {bias} after {last}");
            last = bias;
            let (d, s) = gaussian_profile(0.5, 0.05, peak, 0.0, 1.0, 201);
            let coarse = measure_rendering_bias(&d, &s, 0.5).unwrap();
            assert!((coarse.normalized - fine.normalized).abs() < 0.01);
        }
    }

    fn tiny_field(seed: u64) -> RadianceField<f64> {
        let config = FieldConfig {
            grid: HashGridConfig { levels: 2, table_size: 64, features: 2, base_resolution: 4, max_resolution: 8 },
            density_hidden: 8,
            density_out: 4,
            color_hidden: 8,
        };
        let mut f = RadianceField::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in f.tables.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        f
    }

    #[test]
    fn batch_render_matches_per_ray_composite() {
        let f = tiny_field(1);
        let g = OccupancyGrid::new(8, 0.5).unwrap();
        let rays = [axis_ray(), Ray::new([0.5, 0.0, 0.5], [0.0, 1.0, 0.0], 0.0, 1.0).unwrap()];
        let opts = RenderOptions { step: 0.05, max_samples: 64, early_stop: 0.0 };
        let (out, _) = render_batch(&f, &g, &rays, &opts, None).unwrap();
        for (ray, o) in rays.iter().zip(&out) {
            let s = march_ray(ray, &g, opts.step, opts.max_samples);
            let pos: Vec<[f64; 3]> = s.positions.clone();
            let dirs = vec![ray.direction; pos.len()];
            let (sig, rgb, _, _) = f.query_radiance(&pos, &dirs).unwrap();
            let c = composite(&sig, &s.deltas, &rgb, &s.depths);
            assert!((c.depth - o.depth).abs() < 1e-12);
            assert!((0..3).all(|k| (c.color[k] - o.color[k]).abs() < 1e-12));
        }
    }

    #[test]
    fn batch_backward_matches_finite_differences() {
        let f = tiny_field(2);
        let g = OccupancyGrid::new(8, 0.5).unwrap();
        let rays = [axis_ray(), Ray::new([0.1, 0.2, 0.3], normalize([0.5, 0.6, 0.7]), 0.0, 1.2).unwrap()];
        let opts = RenderOptions { step: 0.07, max_samples: 64, early_stop: 0.0 };
        let gc = [[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]];
        let gd = [0.7, -0.3];
        let objective = |f: &RadianceField<f64>| {
            let (out, _) = render_batch(f, &g, &rays, &opts, None).unwrap();
            out.iter().enumerate().map(|(r, o)| (0..3).map(|c| gc[r][c] * o.color[c]).sum::<f64>() + gd[r] * o.depth).sum::<f64>()
        };
        let (_, tape) = render_batch(&f, &g, &rays, &opts, None).unwrap();
        let mut grads = FieldGrads::zeros(&f.config).unwrap();
        render_batch_backward(&f, &tape, &gc, &gd, &mut grads).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..f.tables.data.len()).step_by(7) {
            let mut p = f.clone();
            let mut q = f.clone();
            p.tables.data[i] += h;
            q.tables.data[i] -= h;
            let fd = (objective(&p) - objective(&q)) / (2.0 * h);
            let a = grads.tables[i];
            assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-4, "table {i}: {fd} vs {a}");
            checked += 1;
        }
        for i in 0..f.density.data.len() {
            let mut p = f.clone();
            let mut q = f.clone();
            p.density.data[i] += h;
            q.density.data[i] -= h;
            let fd = (objective(&p) - objective(&q)) / (2.0 * h);
            let a = grads.density.data[i];
            assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-4, "density {i}: {fd} vs {a}");
        }
        assert!(checked > 10);
    }

    #[test]
    fn early_stop_drops_hidden_samples() {
        let mut f = tiny_field(3);
        // huge constant density: the first sample is opaque
        let (w, b) = f.density.layer_mut(f.density.layer_count() - 1);
        w.iter_mut().for_each(|v| *v = 0.0);
        b[0] = 14.0;
        let g = OccupancyGrid::new(8, 0.5).unwrap();
        let opts = RenderOptions { step: 0.05, max_samples: 64, early_stop: 1e-4 };
        let (out, tape) = render_batch(&f, &g, &[axis_ray()], &opts, None).unwrap();
        assert_eq!(out[0].samples, 1);
        assert_eq!(tape.sample_count(), 1);
    }

    #[test]
    fn scan_azimuth_count() {
        assert_eq!(DepthScan::azimuths(1.0).unwrap().len(), 360);
        assert_eq!(DepthScan::azimuths(0.5).unwrap().len(), 720);
        assert!(DepthScan::azimuths(0.0).is_err());
    }

    #[test]
    fn empty_field_scan_has_no_returns() {
        let mut f = tiny_field(4);
        let (w, b) = f.density.layer_mut(f.density.layer_count() - 1);
        w.iter_mut().for_each(|v| *v = 0.0);
        b[0] = -15.0;
        let g = OccupancyGrid::new(8, 0.5).unwrap();
        let frame = SceneFrame::from_box([0.0; 3], [4.0, 4.0, 2.0], 0.05);
        let opts = RenderOptions { step: 0.01, ..Default::default() };
        let scan = render_scan(&f, &g, &frame, [2.0, 2.0, 1.0], 10.0, &opts).unwrap();
        assert_eq!(scan.len(), 36);
        assert!(scan.depths.iter().all(|d| d.is_none()));
    }
}
