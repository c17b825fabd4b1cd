//! Binary training checkpoints. Layout, all little-endian:
//!
//! `VNCK`, format version (u32), config hash (u64), config TOML text,
//! step counters and clocks, hash tables, both MLPs as `VNRF` blobs, the
//! three Adam states, the density projection, the skip grid, training
//! statistics and the metrics timeline. Floats are stored as raw bits so
//! a save, load, save cycle reproduces the file byte for byte.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::Arc;

use virus_field::diffnet::{read_mlp, write_mlp, AdamConfig, OptimState};
use virus_field::field::RadianceField;
use virus_field::hashenc::HashTables;
use virus_field::occgrid::{CellBox, DensityGrid, DensityProjectionParams, GridCounters, Occupancy, OccupancyGrid, SkipGrid};
use virus_field::simrig::Dataset;
use virus_field::train::{FieldOptimizer, TimelineRow, TrainStats, Trainer};

use crate::config::{config_hash, RunConfig};
use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved config exactly as written to the run directory.
    pub config_text: String,
    pub config: RunConfig,
    pub step: u64,
    pub train_seconds: f64,
    pub wall_time: f64,
    pub field: RadianceField<f32>,
    pub optim: FieldOptimizer,
    pub projection: DensityProjectionParams,
    pub grid: SkipGrid,
    pub stats: TrainStats,
    pub timeline: Vec<TimelineRow>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(v) => {
                self.u8(1);
                self.f64(v);
            }
            None => self.u8(0),
        }
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.len(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(bad(format!("bad option tag {t}"))),
        }
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let left = self.0.get_ref().len() as u64 - self.0.position();
        if n > left {
            return Err(bad(format!("length {n} exceeds the remaining {left} bytes")));
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
        String::from_utf8(b).map_err(|_| bad("config text is not UTF-8"))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(f32::from_bits(self.u32()?))).collect()
    }
}

fn write_adam(w: &mut Writer, s: &OptimState<f32>) {
    w.f64(s.config.beta1);
    w.f64(s.config.beta2);
    w.f64(s.config.epsilon);
    w.u64(s.step);
    w.f32s(&s.first);
    w.f32s(&s.second);
}

fn read_adam(r: &mut Reader, len: usize) -> Result<OptimState<f32>> {
    let config = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, epsilon: r.f64()? };
    let step = r.u64()?;
    let first = r.f32s()?;
    let second = r.f32s()?;
    if first.len() != len || second.len() != len {
        return Err(bad("optimizer state does not match the parameter count"));
    }
    Ok(OptimState { config, step, first, second })
}

fn write_counters(w: &mut Writer, c: &GridCounters) {
    for v in [c.nerf_updates, c.depth_updates, c.cell_updates, c.anomalies] {
        w.u64(v);
    }
}

fn read_counters(r: &mut Reader) -> Result<GridCounters> {
    Ok(GridCounters { nerf_updates: r.u64()?, depth_updates: r.u64()?, cell_updates: r.u64()?, anomalies: r.u64()? })
}

fn write_grid(w: &mut Writer, g: &SkipGrid) {
    match g {
        SkipGrid::Virus(g) => {
            w.u8(0);
            w.len(g.resolution());
            w.f64(g.threshold);
            for v in g.active.lo.iter().chain(&g.active.hi) {
                w.len(*v);
            }
            write_counters(w, &g.counters);
            w.f32s(g.cells());
        }
        SkipGrid::InstantNgp(g) => {
            w.u8(1);
            w.len(g.resolution());
            w.f64(g.decay);
            w.f64(g.cap);
            w.u64(g.warmup_steps);
            w.f64(g.mean());
            w.u64(g.updates);
            w.f32s(g.values());
        }
        SkipGrid::Disabled(res) => {
            w.u8(2);
            w.len(*res);
        }
    }
}

fn read_grid(r: &mut Reader) -> Result<SkipGrid> {
    match r.u8()? {
        0 => {
            let res = r.u64()? as usize;
            let threshold = r.f64()?;
            let mut b = [0usize; 6];
            for v in &mut b {
                *v = r.u64()? as usize;
            }
            let active = CellBox { lo: [b[0], b[1], b[2]], hi: [b[3], b[4], b[5]] };
            let counters = read_counters(r)?;
            let cells = r.f32s()?;
            Ok(SkipGrid::Virus(OccupancyGrid::from_cells(res, cells, threshold, active, counters)?))
        }
        1 => {
            let res = r.u64()? as usize;
            let (decay, cap, warmup) = (r.f64()?, r.f64()?, r.u64()?);
            let (mean, updates) = (r.f64()?, r.u64()?);
            let mut g = DensityGrid::from_values(res, r.f32s()?, mean, updates)?;
            g.decay = decay;
            g.cap = cap;
            g.warmup_steps = warmup;
            Ok(SkipGrid::InstantNgp(g))
        }
        2 => Ok(SkipGrid::Disabled(r.u64()? as usize)),
        t => Err(bad(format!("unknown grid tag {t}"))),
    }
}

fn write_stats(w: &mut Writer, s: &TrainStats) {
    w.u64(s.skipped_steps);
    w.u64(s.causality_violations);
    w.f64(s.max_sampled_timestamp);
    w.u64(s.sampled_rays);
    w.u64(s.marched_samples);
    w.len(s.frames_consumed);
    w.u64(s.depth_update_frames);
    w.u64(s.grid_updates);
}

fn read_stats(r: &mut Reader) -> Result<TrainStats> {
    Ok(TrainStats {
        skipped_steps: r.u64()?,
        causality_violations: r.u64()?,
        max_sampled_timestamp: r.f64()?,
        sampled_rays: r.u64()?,
        marched_samples: r.u64()?,
        frames_consumed: r.u64()? as usize,
        depth_update_frames: r.u64()?,
        grid_updates: r.u64()?,
    })
}

fn write_row(w: &mut Writer, t: &TimelineRow) {
    w.u64(t.step);
    for v in [t.wall_time_s, t.l_c, t.l_irs, t.l_uss, t.l_tot, t.steps_per_sec] {
        w.f64(v);
    }
    for v in [t.psnr, t.nnd_acc_zone3, t.nnd_cov_zone3] {
        w.opt_f64(v);
    }
}

fn read_row(r: &mut Reader) -> Result<TimelineRow> {
    Ok(TimelineRow {
        step: r.u64()?,
        wall_time_s: r.f64()?,
        l_c: r.f64()?,
        l_irs: r.f64()?,
        l_uss: r.f64()?,
        l_tot: r.f64()?,
        steps_per_sec: r.f64()?,
        psnr: r.opt_f64()?,
        nnd_acc_zone3: r.opt_f64()?,
        nnd_cov_zone3: r.opt_f64()?,
    })
}

impl Checkpoint {
    pub fn capture(config_text: &str, config: &RunConfig, t: &Trainer) -> Self {
        Self {
            config_text: config_text.into(),
            config: config.clone(),
            step: t.step,
            train_seconds: t.train_seconds,
            wall_time: t.wall_time(),
            field: t.field.clone(),
            optim: t.optim.clone(),
            projection: t.projection,
            grid: t.grid.clone(),
            stats: t.stats.clone(),
            timeline: t.timeline.clone(),
        }
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config_text)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.config_hash());
        w.str(&self.config_text);
        w.u64(self.step);
        w.f64(self.train_seconds);
        w.f64(self.wall_time);
        w.f32s(&self.field.tables.data);
        write_mlp(&self.field.density, &mut w.0)?;
        write_mlp(&self.field.color, &mut w.0)?;
        for s in [&self.optim.tables, &self.optim.density, &self.optim.color] {
            write_adam(&mut w, s);
        }
        w.f64(self.projection.zeta);
        w.f64(self.projection.sigma_t_max);
        w.f64(self.projection.sigma_t);
        write_grid(&mut w, &self.grid);
        write_stats(&mut w, &self.stats);
        w.len(self.timeline.len());
        for row in &self.timeline {
            write_row(&mut w, row);
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(Cursor::new(bytes));
        if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (missing VNCK magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("format version {version}, this build reads version {CHECKPOINT_VERSION}")));
        }
        let hash = r.u64()?;
        let config_text = r.str()?;
        if config_hash(&config_text) != hash {
            return Err(bad("stored config does not match its hash"));
        }
        let config: RunConfig = toml::from_str(&config_text).map_err(|e| bad(format!("stored config: {e}")))?;
        let step = r.u64()?;
        let train_seconds = r.f64()?;
        let wall_time = r.f64()?;

        let mut field = RadianceField::<f32>::init(config.train.field, 0)?;
        let tables = r.f32s()?;
        if tables.len() != field.tables.data.len() {
            return Err(bad("hash table size does not match the config"));
        }
        field.tables = HashTables { config: config.train.field.grid, data: tables };
        let density = read_mlp(&mut r.0)?;
        let color = read_mlp(&mut r.0)?;
        if density.widths() != field.density.widths() || color.widths() != field.color.widths() {
            return Err(bad("network widths do not match the config"));
        }
        field.density = density;
        field.color = color;
        let optim = FieldOptimizer {
            tables: read_adam(&mut r, field.tables.data.len())?,
            density: read_adam(&mut r, field.density.data.len())?,
            color: read_adam(&mut r, field.color.data.len())?,
        };
        let projection = DensityProjectionParams { zeta: r.f64()?, sigma_t_max: r.f64()?, sigma_t: r.f64()? };
        let grid = read_grid(&mut r)?;
        let stats = read_stats(&mut r)?;
        let rows = r.len()?;
        let timeline = (0..rows).map(|_| read_row(&mut r)).collect::<Result<Vec<_>>>()?;
        if r.0.position() != bytes.len() as u64 {
            return Err(bad("trailing bytes after the timeline"));
        }
        Ok(Self { config_text, config, step, train_seconds, wall_time, field, optim, projection, grid, stats, timeline })
    }

    /// Writes through a temporary file so an interrupted save never leaves
    /// a torn checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(CliError::io(&tmp))?;
        fs::rename(&tmp, path).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(CliError::io(path))?)
    }

    /// A trainer positioned exactly where this checkpoint was taken.
    pub fn restore(&self, dataset: Arc<Dataset>) -> Result<Trainer> {
        let mut t = Trainer::new(self.config.train.clone(), dataset)?;
        if std::mem::discriminant(&t.grid) != std::mem::discriminant(&self.grid) {
            return Err(bad("stored grid variant differs from the config"));
        }
        t.field = self.field.clone();
        t.optim = self.optim.clone();
        t.grid = self.grid.clone();
        t.step = self.step;
        t.projection = self.projection;
        t.stats = self.stats.clone();
        t.timeline = self.timeline.clone();
        t.resume_clock(self.wall_time, self.train_seconds);
        Ok(t)
    }
}
