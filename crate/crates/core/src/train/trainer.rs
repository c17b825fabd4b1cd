//! The training loop: batch sampling, loss and backprop, grid scheduling,
//! offline/online data visibility and periodic evaluation snapshots.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{BatchSampler, PixelBatch, SensorSet};
use super::loss::{color_loss, color_loss_grad, irs_loss, irs_loss_grad, uss_loss, uss_loss_grad, LossReduction, LossReport, LossWeights};
use crate::diffnet::{AdamConfig, LrSchedule, OptimState};
use crate::error::{invalid, Error, Result};
use crate::eval::{compare_scans, gt_scan, psnr, scan_center, test_frames, zone_metrics, GlobalMap, ScanComparison, ScanMetrics, INLIER_THRESHOLD};
use crate::field::{FieldConfig, FieldGrads, RadianceField};
use crate::occgrid::{CellBox, DensityGrid, DensityProjectionParams, InverseSensorModelParams, Occupancy, OccupancyGrid, SkipGrid};
use crate::render::{render_batch, render_batch_backward, render_scan, DepthScan, RenderOptions};
use crate::simrig::Dataset;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every frame visible from the first step.
    Offline,
    /// Frames become visible as a playback clock passes their timestamps.
    Online,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            _ => invalid(format!("unknown mode '{s}' (expected offline or online)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridVariant {
    /// Bayesian occupancy grid fed by NeRF and depth updates.
    #[serde(rename = "virus")]
    Virus,
    /// Density-threshold grid, all cells early and a quarter afterwards.
    #[serde(rename = "instantngp-style")]
    InstantNgp,
    /// No skipping at all.
    #[serde(rename = "disabled")]
    Disabled,
}

impl fmt::Display for GridVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridVariant::Virus => "virus",
            GridVariant::InstantNgp => "instantngp-style",
            GridVariant::Disabled => "disabled",
        })
    }
}

impl FromStr for GridVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "virus" => Ok(GridVariant::Virus),
            "instantngp-style" | "instantngp" => Ok(GridVariant::InstantNgp),
            "disabled" | "none" => Ok(GridVariant::Disabled),
            _ => invalid(format!("unknown grid variant '{s}' (expected virus, instantngp-style or disabled)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    /// USS margin in meters.
    pub eps_uss: f64,
    pub loss_weights: LossWeights,
    pub loss_reduction: LossReduction,
    /// Grid refresh period in steps.
    pub grid_cadence: u64,
    /// Cells sampled per occupancy-grid NeRF update.
    pub nerf_update_samples: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Dataset seconds per run length, relative: 1 reaches the last frame
    /// on the last step, 2 halfway through.
    pub playback_speed: f64,
    /// Offline depth-update sweep period in steps.
    pub depth_sweep_every: u64,
    /// Evaluation snapshot period in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_test_poses: usize,
    pub psnr_images: usize,
    pub scan_step_deg: f64,
    pub sensors: SensorSet,
    /// Cast training rays from the noisy pose estimates.
    pub noisy_poses: bool,
    pub grid: GridVariant,
    pub grid_resolution: usize,
    pub occupancy_threshold: f64,
    pub projection: DensityProjectionParams,
    /// Thickness in cells, range in meters.
    pub inverse_model: InverseSensorModelParams,
    pub render: RenderOptions,
    /// Pixels within this elevation of the horizon inside the cone get the
    /// USS range.
    pub uss_elevation_deg: f64,
    /// Depth-camera pixel stride for the grid's depth update.
    pub depth_update_stride: usize,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1024,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            eps_uss: 0.1,
            loss_weights: LossWeights::default(),
            loss_reduction: LossReduction::Sum,
            grid_cadence: 16,
            nerf_update_samples: 1024,
            seed: 0,
            mode: Mode::Offline,
            playback_speed: 1.0,
            depth_sweep_every: 200,
            eval_every: 0,
            eval_test_poses: 8,
            psnr_images: 2,
            scan_step_deg: 1.0,
            sensors: SensorSet::ALL_LOW_COST,
            noisy_poses: false,
            grid: GridVariant::Virus,
            grid_resolution: 128,
            occupancy_threshold: 0.5,
            projection: DensityProjectionParams::default(),
            inverse_model: InverseSensorModelParams::default(),
            render: RenderOptions::default(),
            uss_elevation_deg: 5.0,
            depth_update_stride: 4,
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensors.validate()?;
        self.field.grid.validate()?;
        self.inverse_model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return invalid("steps and batch size must be positive");
        }
        if !(self.eps_uss >= 0.0) {
            return invalid(format!("eps_uss must be non-negative, got {}", self.eps_uss));
        }
        if self.grid_cadence == 0 || self.depth_sweep_every == 0 {
            return invalid("grid cadence and depth sweep period must be at least 1");
        }
        if !(self.playback_speed > 0.0) {
            return invalid("playback speed must be positive");
        }
        if self.grid_resolution == 0 || !(self.occupancy_threshold > 0.0 && self.occupancy_threshold < 1.0) {
            return invalid("grid resolution must be positive and the occupancy threshold in (0, 1)");
        }
        if !(self.projection.zeta > 0.0 && self.projection.sigma_t_max > 0.0) {
            return invalid("density projection needs positive zeta and sigma_t_max");
        }
        if !(self.render.step > 0.0) || self.render.max_samples == 0 {
            return invalid("render step and sample budget must be positive");
        }
        if !(self.scan_step_deg > 0.0) || self.eval_test_poses == 0 || self.depth_update_stride == 0 {
            return invalid("scan step, test pose count and depth stride must be positive");
        }
        let w = self.loss_weights;
        if ![w.color, w.irs, w.uss].iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return invalid("loss weights must be finite and non-negative");
        }
        if !(self.lr.start > 0.0 && self.lr.end > 0.0) {
            return invalid("learning rates must be positive");
        }
        Ok(())
    }
}

/// Loss constants for one scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub eps_uss: f64,
    pub weights: LossWeights,
    pub reduction: LossReduction,
    /// World meters per unit-cube length.
    pub side: f64,
}

/// Renders a batch, computes the three loss terms and, when `grads` is
/// given and the loss is finite, accumulates field gradients.
pub fn evaluate_batch<T: Real>(
    field: &RadianceField<T>,
    grid: &impl Occupancy,
    batch: &PixelBatch,
    opts: &RenderOptions,
    settings: &LossSettings,
    grads: Option<&mut FieldGrads<T>>,
) -> Result<LossReport> {
    Ok(evaluate_batch_counted(field, grid, batch, opts, settings, grads)?.0)
}

/// `evaluate_batch` plus the number of composited samples.
fn evaluate_batch_counted<T: Real>(
    field: &RadianceField<T>,
    grid: &impl Occupancy,
    batch: &PixelBatch,
    opts: &RenderOptions,
    settings: &LossSettings,
    grads: Option<&mut FieldGrads<T>>,
) -> Result<(LossReport, usize)> {
    let (out, tape) = render_batch(field, grid, &batch.rays(), opts, Some(&batch.offsets))?;
    let n = out.len();
    let side = T::lit(settings.side);
    let w = settings.weights;

    let color_rows: Vec<usize> = (0..n).filter(|&i| batch.records[i].color.is_some()).collect();
    let pred_c: Vec<[T; 3]> = color_rows.iter().map(|&i| out[i].color).collect();
    let target_c: Vec<[T; 3]> = color_rows.iter().map(|&i| batch.records[i].color.expect("filtered").map(T::lit)).collect();
    let n_c = color_rows.len();
    let sum_c = color_loss(&pred_c, &target_c);

    let depth_m: Vec<T> = out.iter().map(|o| o.depth * side).collect();
    let irs_t: Vec<Option<T>> = batch.records.iter().map(|r| r.point_depth.map(T::lit)).collect();
    let uss_t: Vec<Option<T>> = batch.records.iter().map(|r| r.uss_depth.map(T::lit)).collect();
    let n_irs = irs_t.iter().flatten().count();
    let n_uss = uss_t.iter().flatten().count();
    let eps = T::lit(settings.eps_uss);
    let sum_irs = irs_loss(&depth_m, &irs_t);
    let sum_uss = uss_loss(&depth_m, &uss_t, eps);

    let mean = |sum: T, w: f64, n: usize| w * LossReduction::Mean.scale(n) * sum.f64();
    let mut report = LossReport::new(mean(sum_c, w.color, n_c), mean(sum_irs, w.irs, n_irs), mean(sum_uss, w.uss, n_uss), n_c, n_irs, n_uss);
    // backpropagated factors per term
    let red = settings.reduction;
    let scale_c = T::lit(w.color * red.scale(n_c));
    let scale_irs = T::lit(w.irs * red.scale(n_irs));
    let scale_uss = T::lit(w.uss * red.scale(n_uss));
    report.objective = (scale_c * sum_c + scale_irs * sum_irs + scale_uss * sum_uss).f64();
    if let Some(grads) = grads {
        if report.is_finite() {
            let mut g_color = vec![[T::zero(); 3]; n];
            for (k, g) in color_loss_grad(&pred_c, &target_c).into_iter().enumerate() {
                g_color[color_rows[k]] = g.map(|v| v * scale_c);
            }
            let gi = irs_loss_grad(&depth_m, &irs_t);
            let gu = uss_loss_grad(&depth_m, &uss_t, eps);
            // chain rule through the meter conversion
            let g_depth: Vec<T> = (0..n).map(|i| side * (scale_irs * gi[i] + scale_uss * gu[i])).collect();
            render_batch_backward(field, &tape, &g_color, &g_depth, grads)?;
        }
    }
    Ok((report, tape.sample_count()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldOptimizer {
    pub tables: OptimState<f32>,
    pub density: OptimState<f32>,
    pub color: OptimState<f32>,
}

impl FieldOptimizer {
    pub fn new(field: &RadianceField<f32>, config: AdamConfig) -> Self {
        Self {
            tables: OptimState::new(field.tables.data.len(), config),
            density: OptimState::new(field.density.data.len(), config),
            color: OptimState::new(field.color.data.len(), config),
        }
    }

    pub fn step(&mut self, field: &mut RadianceField<f32>, grads: &FieldGrads<f32>, lr: f64) -> Result<()> {
        self.tables.step(&mut field.tables.data, &grads.tables, lr)?;
        self.density.step(&mut field.density.data, &grads.density.data, lr)?;
        self.color.step(&mut field.color.data, &grads.color.data, lr)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub skipped_steps: u64,
    /// Sampled rays whose frame lay in the future of the playback clock.
    pub causality_violations: u64,
    /// Latest frame timestamp any batch has used.
    pub max_sampled_timestamp: f64,
    pub sampled_rays: u64,
    pub marched_samples: u64,
    /// Frames whose measurements have entered training (a prefix).
    pub frames_consumed: usize,
    pub depth_update_frames: u64,
    pub grid_updates: u64,
}

/// One evaluation snapshot of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub step: u64,
    pub wall_time_s: f64,
    pub l_c: f64,
    pub l_irs: f64,
    pub l_uss: f64,
    pub l_tot: f64,
    pub steps_per_sec: f64,
    pub psnr: Option<f64>,
    pub nnd_acc_zone3: Option<f64>,
    pub nnd_cov_zone3: Option<f64>,
}

pub const TIMELINE_HEADER: &str = "step,wall_time_s,L_c,L_IRS,L_USS,L_tot,steps_per_sec,psnr,nnd_acc_zone3,nnd_cov_zone3";

/// Missing values are empty fields.
pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut s = format!("{TIMELINE_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.3},{:.8},{:.8},{:.8},{:.8},{:.3},{},{},{}",
            r.step,
            r.wall_time_s,
            r.l_c,
            r.l_irs,
            r.l_uss,
            r.l_tot,
            r.steps_per_sec,
            opt(r.psnr),
            opt(r.nnd_acc_zone3),
            opt(r.nnd_cov_zone3)
        )
        .expect("string write");
    }
    s
}

/// Test poses and their ground-truth scans.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub map: GlobalMap,
    pub frames: Vec<usize>,
    pub ground_truth: Vec<DepthScan>,
}

impl Evaluator {
    pub fn new(ds: &Dataset, test_poses: usize, scan_step_deg: f64) -> Result<Self> {
        let map = GlobalMap::from_dataset(ds);
        let frames = test_frames(ds.frames.len(), test_poses);
        let ground_truth = frames
            .iter()
            .map(|&f| gt_scan(&map, scan_center(ds.frames[f].pose, &ds.meta.rig), scan_step_deg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { map, frames, ground_truth })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: ScanMetrics,
    pub psnr: Option<f64>,
    pub frames: Vec<usize>,
    pub predicted: Vec<DepthScan>,
    pub ground_truth: Vec<DepthScan>,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    // separate key from the simulator's per-frame streams
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e69_6e67);
    rng.set_stream(step);
    rng
}

pub struct Trainer {
    pub config: TrainConfig,
    dataset: Arc<Dataset>,
    sampler: BatchSampler,
    settings: LossSettings,
    pub field: RadianceField<f32>,
    pub grid: SkipGrid,
    pub optim: FieldOptimizer,
    /// Completed steps.
    pub step: u64,
    pub projection: DensityProjectionParams,
    pub stats: TrainStats,
    pub timeline: Vec<TimelineRow>,
    /// Seconds spent inside `step`, used for steps/sec.
    pub train_seconds: f64,
    /// Wall time carried over from before a resume.
    pub wall_offset: f64,
    /// Latest snapshot taken by `advance`.
    pub last_eval: Option<EvalReport>,
    started: Instant,
    grads: FieldGrads<f32>,
    evaluator: Option<Evaluator>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: Arc<Dataset>) -> Result<Self> {
        config.validate()?;
        if dataset.frames.is_empty() {
            return invalid("dataset has no frames");
        }
        if dataset.frames.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return invalid("frame timestamps must increase strictly");
        }
        let sampler = BatchSampler::new(&dataset, config.sensors, config.noisy_poses, config.uss_elevation_deg, config.depth_update_stride)?;
        let frame = *sampler.scene_frame();
        let res = config.grid_resolution;
        let grid = match config.grid {
            GridVariant::Virus => {
                let mut g = OccupancyGrid::new(res, config.occupancy_threshold)?;
                let (lo, hi) = frame.unit_box();
                g.active = CellBox::covering(lo, hi, res);
                SkipGrid::Virus(g)
            }
            GridVariant::InstantNgp => SkipGrid::InstantNgp(DensityGrid::new(res)?),
            GridVariant::Disabled => SkipGrid::Disabled(res),
        };
        let field = RadianceField::init(config.field, config.seed)?;
        let optim = FieldOptimizer::new(&field, config.adam);
        let grads = FieldGrads::zeros(&config.field)?;
        let settings = LossSettings { eps_uss: config.eps_uss, weights: config.loss_weights, reduction: config.loss_reduction, side: frame.side };
        let projection = config.projection;
        Ok(Self {
            config,
            dataset,
            sampler,
            settings,
            field,
            grid,
            optim,
            step: 0,
            projection,
            stats: TrainStats::default(),
            timeline: Vec::new(),
            train_seconds: 0.0,
            wall_offset: 0.0,
            last_eval: None,
            started: Instant::now(),
            grads,
            evaluator: None,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn sampler(&self) -> &BatchSampler {
        &self.sampler
    }

    pub fn loss_settings(&self) -> &LossSettings {
        &self.settings
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Playback clock at a step, in dataset seconds.
    pub fn now(&self, step: u64) -> f64 {
        let frames = &self.dataset.frames;
        match self.config.mode {
            Mode::Offline => f64::INFINITY,
            Mode::Online => {
                let t0 = frames[0].timestamp;
                let span = frames[frames.len() - 1].timestamp - t0;
                let frac = if self.config.steps > 1 { step as f64 / (self.config.steps - 1) as f64 } else { 1.0 };
                t0 + self.config.playback_speed * span * frac
            }
        }
    }

    /// Number of frames (a prefix) whose timestamp the clock has reached.
    pub fn visible_frames(&self, step: u64) -> usize {
        let now = self.now(step);
        self.dataset.frames.iter().take_while(|f| f.timestamp <= now).count().max(1)
    }

    fn depth_update_frame(&mut self, frame: usize) -> Result<()> {
        if let SkipGrid::Virus(g) = &mut self.grid {
            let frame_cfg = self.sampler.scene_frame();
            let mut model = self.config.inverse_model;
            model.max_range = frame_cfg.to_unit_len(model.max_range);
            let rays = self.sampler.depth_rays(&self.dataset, frame);
            for (origin, rays) in &rays {
                g.depth_update(*origin, rays, &model)?;
            }
            if !rays.is_empty() {
                self.stats.depth_update_frames += 1;
            }
        }
        Ok(())
    }

    fn update_grid(&mut self, step: u64, rng: &mut ChaCha8Rng) -> Result<()> {
        let field = &self.field;
        let query = |pts: &[[f64; 3]]| -> Result<Vec<f64>> {
            let p: Vec<[f32; 3]> = pts.iter().map(|p| p.map(|v| v as f32)).collect();
            Ok(field.density_pass(&p)?.sigma.iter().map(|&s| s as f64).collect())
        };
        match &mut self.grid {
            SkipGrid::Virus(g) => {
                g.nerf_update(query, self.config.nerf_update_samples, &mut self.projection, rng)?;
            }
            SkipGrid::InstantNgp(g) => {
                g.update(step, query, rng)?;
            }
            SkipGrid::Disabled(_) => return Ok(()),
        }
        self.stats.grid_updates += 1;
        Ok(())
    }

    /// One optimization step. A step with a non-finite loss or gradient
    /// leaves the parameters untouched and is counted as skipped.
    pub fn step(&mut self) -> Result<LossReport> {
        if self.finished() {
            return invalid("training already reached its step budget");
        }
        let timer = Instant::now();
        let step = self.step;
        let mut rng = step_rng(self.config.seed, step);
        let now = self.now(step);
        let visible = self.visible_frames(step);

        match self.config.mode {
            Mode::Online => {
                for f in self.stats.frames_consumed..visible {
                    self.depth_update_frame(f)?;
                }
            }
            Mode::Offline => {
                if step % self.config.depth_sweep_every == 0 {
                    for f in 0..self.dataset.frames.len() {
                        self.depth_update_frame(f)?;
                    }
                }
            }
        }
        self.stats.frames_consumed = self.stats.frames_consumed.max(visible);
        if step % self.config.grid_cadence == 0 {
            self.update_grid(step, &mut rng)?;
        }

        let frames: Vec<usize> = (0..visible).collect();
        let batch = self.sampler.sample(&self.dataset, &frames, self.config.batch_size, &mut rng)?;
        for r in &batch.records {
            let t = self.dataset.frames[r.frame].timestamp;
            if t > now {
                self.stats.causality_violations += 1;
            }
            self.stats.max_sampled_timestamp = self.stats.max_sampled_timestamp.max(t);
        }
        self.stats.sampled_rays += batch.len() as u64;

        self.grads.clear();
        let (report, samples) =
            evaluate_batch_counted(&self.field, &self.grid, &batch, &self.config.render, &self.settings, Some(&mut self.grads))?;
        self.stats.marched_samples += samples as u64;
        if report.is_finite() && self.grads.all_finite() {
            let lr = self.config.lr.at(step, self.config.steps);
            self.optim.step(&mut self.field, &self.grads, lr)?;
        } else {
            self.stats.skipped_steps += 1;
            eprintln!("warning: step {step} skipped, non-finite loss or gradient (L_tot = {})", report.l_tot);
        }
        self.step += 1;
        self.train_seconds += timer.elapsed().as_secs_f64();
        Ok(report)
    }

    pub fn steps_per_sec(&self) -> f64 {
        if self.train_seconds > 0.0 {
            self.step as f64 / self.train_seconds
        } else {
            0.0
        }
    }

    /// A step plus, when due, an evaluation snapshot appended to the
    /// timeline.
    pub fn advance(&mut self) -> Result<LossReport> {
        let report = self.step()?;
        let every = self.config.eval_every;
        if self.finished() || (every > 0 && self.step % every == 0) {
            let eval = self.evaluate()?;
            let z = eval.metrics.zone3();
            let finite = |v: f64| v.is_finite().then_some(v);
            self.timeline.push(TimelineRow {
                step: self.step,
                wall_time_s: self.wall_offset + self.started.elapsed().as_secs_f64(),
                l_c: report.l_c,
                l_irs: report.l_irs,
                l_uss: report.l_uss,
                l_tot: report.l_tot,
                steps_per_sec: self.steps_per_sec(),
                psnr: eval.psnr.and_then(finite),
                nnd_acc_zone3: z.accuracy.map(|s| s.mean_nnd),
                nnd_cov_zone3: z.coverage.map(|s| s.mean_nnd),
            });
            self.last_eval = Some(eval);
        }
        Ok(report)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.advance()?;
        }
        Ok(())
    }

    fn evaluator(&mut self) -> Result<&Evaluator> {
        if self.evaluator.is_none() {
            self.evaluator = Some(Evaluator::new(&self.dataset, self.config.eval_test_poses, self.config.scan_step_deg)?);
        }
        Ok(self.evaluator.as_ref().expect("just built"))
    }

    /// Test poses training has seen: all of them offline, the consumed
    /// prefix online.
    pub fn visited_test_frames(&mut self) -> Result<Vec<usize>> {
        let consumed = self.stats.frames_consumed;
        let online = self.config.mode == Mode::Online;
        Ok(self.evaluator()?.frames.iter().copied().filter(|&f| !online || f < consumed).collect())
    }

    /// Scan metrics pooled over the visited test poses plus image PSNR on
    /// the first few of them.
    pub fn evaluate(&mut self) -> Result<EvalReport> {
        let frames = self.visited_test_frames()?;
        self.evaluate_frames(&frames)
    }

    pub fn evaluate_frames(&mut self, frames: &[usize]) -> Result<EvalReport> {
        self.evaluator()?;
        let ev = self.evaluator.as_ref().expect("built above");
        let ds = &self.dataset;
        let rig = &ds.meta.rig;
        let scene = *self.sampler.scene_frame();
        let mut pooled = ScanComparison::default();
        let mut predicted = Vec::new();
        let mut ground_truth = Vec::new();
        for &f in frames {
            let k = ev.frames.iter().position(|&t| t == f).ok_or_else(|| Error::InvalidArgument(format!("frame {f} is not a test pose")))?;
            let center = scan_center(ds.frames[f].pose, rig);
            let pred = render_scan(&self.field, &self.grid, &scene, center, self.config.scan_step_deg, &self.config.render)?;
            pooled.extend(compare_scans(&pred, &ev.ground_truth[k])?);
            predicted.push(pred);
            ground_truth.push(ev.ground_truth[k].clone());
        }
        let psnr = self.image_psnr(&frames[..frames.len().min(self.config.psnr_images)])?;
        Ok(EvalReport { metrics: zone_metrics(&pooled, INLIER_THRESHOLD), psnr, frames: frames.to_vec(), predicted, ground_truth })
    }

    /// Rendered image of one stack's camera at the frame's true pose,
    /// as flat RGB values.
    pub fn render_image(&self, frame: usize, stack: usize) -> Result<Vec<f64>> {
        let ds = &self.dataset;
        let pose = ds.meta.rig.stack_pose(ds.frames[frame].pose, stack);
        let rays = self.sampler.image_rays(&pose);
        let live: Vec<_> = rays.iter().flatten().copied().collect();
        let mut colors = Vec::with_capacity(live.len());
        for chunk in live.chunks(256) {
            colors.extend(render_batch(&self.field, &self.grid, chunk, &self.config.render, None)?.0.into_iter().map(|r| r.color));
        }
        let mut it = colors.into_iter();
        let mut out = Vec::with_capacity(3 * rays.len());
        for r in &rays {
            let c = if r.is_some() { it.next().expect("one color per live ray") } else { [0.0; 3] };
            out.extend(c.iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    fn image_psnr(&self, frames: &[usize]) -> Result<Option<f64>> {
        if frames.is_empty() {
            return Ok(None);
        }
        let mut rendered = Vec::new();
        let mut reference = Vec::new();
        for &f in frames {
            rendered.extend(self.render_image(f, 0)?);
            let img = &self.dataset.frames[f].stacks[0].image;
            reference.extend((0..img.width * img.height).flat_map(|i| img.pixel(i)));
        }
        Ok(Some(psnr(&rendered, &reference)?))
    }

    /// Restarts the wall clock after a resume so the timeline continues.
    pub fn resume_clock(&mut self, wall_offset: f64, train_seconds: f64) {
        self.wall_offset = wall_offset;
        self.train_seconds = train_seconds;
        self.started = Instant::now();
    }

    pub fn wall_time(&self) -> f64 {
        self.wall_offset + self.started.elapsed().as_secs_f64()
    }
}

/// Trains with every frame visible from the start.
pub fn run_offline(dataset: Arc<Dataset>, mut config: TrainConfig) -> Result<Trainer> {
    config.mode = Mode::Offline;
    let mut t = Trainer::new(config, dataset)?;
    t.run()?;
    Ok(t)
}

/// Trains while a playback clock releases frames by timestamp.
pub fn run_online(dataset: Arc<Dataset>, mut config: TrainConfig) -> Result<Trainer> {
    config.mode = Mode::Online;
    let mut t = Trainer::new(config, dataset)?;
    t.run()?;
    Ok(t)
}
