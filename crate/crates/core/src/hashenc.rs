//! Multiresolution hash encoding of points in the unit cube.
//!
//! Each level is a virtual lattice of resolution `N_l`; its vertices index a
//! table of `T` rows with `F` trainable features, either densely (coarse
//! levels whose vertex count fits) or through a spatial hash. A position is
//! encoded by trilinearly interpolating its eight surrounding rows on every
//! level and concatenating the results from coarse to fine.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::Matrix;
use crate::error::{invalid, Result};
use crate::Real;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Half-width of the uniform table initialization.
pub const TABLE_INIT_BOUND: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self { levels: 8, table_size: 1 << 15, features: 2, base_resolution: 16, max_resolution: 256 }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features == 0 {
            return invalid("hash grid needs at least one level and one feature");
        }
        if !self.table_size.is_power_of_two() {
            return invalid(format!("table size {} is not a power of two", self.table_size));
        }
        if self.base_resolution == 0 || self.base_resolution > self.max_resolution {
            return invalid("base resolution must be positive and at most the max resolution");
        }
        Ok(())
    }

    /// Per-level growth factor `b`.
    pub fn growth(&self) -> f64 {
        if self.levels <= 1 {
            return 1.0;
        }
        ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels as f64 - 1.0)
    }

    pub fn growth_factor(&self) -> f64 {
        self.growth().exp()
    }

    pub fn resolution(&self, level: usize) -> u32 {
        let r = self.base_resolution as f64 * (self.growth() * level as f64).exp();
        (r + 1e-6).floor() as u32
    }

    pub fn output_width(&self) -> usize {
        self.levels * self.features
    }

    pub fn parameter_count(&self) -> usize {
        self.levels * self.table_size * self.features
    }
}

/// Row of `cell` in a level table. Dense row-major when the level's
/// `(res + 1)^3` vertices fit, spatial hash otherwise.
pub fn cell_index(cell: [u32; 3], level_resolution: u32, table_size: usize) -> usize {
    let side = level_resolution as u64 + 1;
    if side * side * side <= table_size as u64 {
        (cell[0] as u64 + side * (cell[1] as u64 + side * cell[2] as u64)) as usize
    } else {
        let h = cell[0].wrapping_mul(PRIMES[0]) ^ cell[1].wrapping_mul(PRIMES[1]) ^ cell[2].wrapping_mul(PRIMES[2]);
        (h as usize) & (table_size - 1)
    }
}

/// Trainable feature tables, level-major: entry `(l, row, f)` lives at
/// `(l * T + row) * F + f`.
#[derive(Clone, Debug, PartialEq)]
pub struct HashTables<T> {
    pub config: HashGridConfig,
    pub data: Vec<T>,
}

impl<T: Real> HashTables<T> {
    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, data: vec![T::zero(); config.parameter_count()] })
    }

    pub fn init(config: HashGridConfig, seed: u64) -> Result<Self> {
        let mut t = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in t.data.iter_mut() {
            *v = T::lit(rng.random_range(-TABLE_INIT_BOUND..=TABLE_INIT_BOUND));
        }
        Ok(t)
    }

    pub fn row(&self, level: usize, row: usize) -> &[T] {
        let f = self.config.features;
        let start = (level * self.config.table_size + row) * f;
        &self.data[start..start + f]
    }

    pub fn row_mut(&mut self, level: usize, row: usize) -> &mut [T] {
        let f = self.config.features;
        let start = (level * self.config.table_size + row) * f;
        &mut self.data[start..start + f]
    }

    pub fn cast<U: Real>(&self) -> HashTables<U> {
        HashTables { config: self.config, data: self.data.iter().map(|v| U::lit(v.f64())).collect() }
    }
}

/// Corner rows (absolute entry offsets divided by `F`) and trilinear weights
/// of one encoded batch, `8 * L` per position.
#[derive(Clone, Debug)]
pub struct InterpRecord<T> {
    pub config: HashGridConfig,
    pub rows: Vec<u32>,
    pub weights: Vec<T>,
}

impl<T: Real> InterpRecord<T> {
    pub fn batch(&self) -> usize {
        self.rows.len() / (8 * self.config.levels)
    }

    pub fn select(&self, keep: &[usize]) -> InterpRecord<T> {
        let stride = 8 * self.config.levels;
        let mut rows = Vec::with_capacity(keep.len() * stride);
        let mut weights = Vec::with_capacity(keep.len() * stride);
        for &i in keep {
            rows.extend_from_slice(&self.rows[i * stride..(i + 1) * stride]);
            weights.extend_from_slice(&self.weights[i * stride..(i + 1) * stride]);
        }
        InterpRecord { config: self.config, rows, weights }
    }
}

fn check_position<T: Real>(p: &[T; 3]) -> Result<()> {
    for c in p {
        if !(*c >= T::zero() && *c <= T::one()) {
            return invalid(format!("position ({}, {}, {}) lies outside the unit cube", p[0], p[1], p[2]));
        }
    }
    Ok(())
}

/// Encodes a batch of unit-cube positions into `L * F` features each.
pub fn encode<T: Real>(positions: &[[T; 3]], tables: &HashTables<T>) -> Result<(Matrix<T>, InterpRecord<T>)> {
    let cfg = tables.config;
    let (levels, feats, tsize) = (cfg.levels, cfg.features, cfg.table_size);
    let width = cfg.output_width();
    let mut out = Matrix::zeros(positions.len(), width);
    let mut rows = vec![0u32; positions.len() * levels * 8];
    let mut weights = vec![T::zero(); positions.len() * levels * 8];
    let resolutions: Vec<u32> = (0..levels).map(|l| cfg.resolution(l)).collect();
    for (n, p) in positions.iter().enumerate() {
        check_position(p)?;
        for (l, &res) in resolutions.iter().enumerate() {
            let scale = T::lit(res as f64);
            let mut base = [0u32; 3];
            let mut frac = [T::zero(); 3];
            for a in 0..3 {
                let x = p[a] * scale;
                let c = x.floor().to_u32().unwrap_or(0).min(res - 1);
                base[a] = c;
                frac[a] = x - T::lit(c as f64);
            }
            let rec = (n * levels + l) * 8;
            let feat_out = &mut out.data[n * width + l * feats..n * width + (l + 1) * feats];
            for corner in 0..8 {
                let mut cell = base;
                let mut w = T::one();
                for a in 0..3 {
                    if corner >> a & 1 == 1 {
                        cell[a] += 1;
                        w *= frac[a];
                    } else {
                        w *= T::one() - frac[a];
                    }
                }
                let row = l * tsize + cell_index(cell, res, tsize);
                rows[rec + corner] = row as u32;
                weights[rec + corner] = w;
                let entry = &tables.data[row * feats..(row + 1) * feats];
                for (o, &e) in feat_out.iter_mut().zip(entry) {
                    *o += w * e;
                }
            }
        }
    }
    Ok((out, InterpRecord { config: cfg, rows, weights }))
}

/// Scatters feature gradients into a dense table-shaped buffer.
pub fn encode_backward_into<T: Real>(record: &InterpRecord<T>, dfeatures: &Matrix<T>, grads: &mut [T]) -> Result<()> {
    let cfg = record.config;
    let feats = cfg.features;
    if dfeatures.rows != record.batch() || dfeatures.cols != cfg.output_width() {
        return invalid(format!(
            "feature gradients are {}x{}, record covers {}x{}",
            dfeatures.rows,
            dfeatures.cols,
            record.batch(),
            cfg.output_width()
        ));
    }
    if grads.len() != cfg.parameter_count() {
        return invalid("gradient buffer does not match the tables");
    }
    for n in 0..record.batch() {
        let drow = dfeatures.row(n);
        for l in 0..cfg.levels {
            let df = &drow[l * feats..(l + 1) * feats];
            let rec = (n * cfg.levels + l) * 8;
            for corner in 0..8 {
                let row = record.rows[rec + corner] as usize;
                let w = record.weights[rec + corner];
                for (g, &d) in grads[row * feats..(row + 1) * feats].iter_mut().zip(df) {
                    *g += w * d;
                }
            }
        }
    }
    Ok(())
}

/// Sparse variant: gradients keyed by `(level, row)`; untouched or
/// zero-gradient rows are absent.
pub fn encode_backward<T: Real>(
    record: &InterpRecord<T>,
    dfeatures: &Matrix<T>,
) -> Result<BTreeMap<(usize, usize), Vec<T>>> {
    let cfg = record.config;
    if dfeatures.rows != record.batch() || dfeatures.cols != cfg.output_width() {
        return invalid("feature gradients do not match the interpolation record");
    }
    let feats = cfg.features;
    let mut out: BTreeMap<(usize, usize), Vec<T>> = BTreeMap::new();
    for n in 0..record.batch() {
        let drow = dfeatures.row(n);
        for l in 0..cfg.levels {
            let df = &drow[l * feats..(l + 1) * feats];
            let rec = (n * cfg.levels + l) * 8;
            for corner in 0..8 {
                let w = record.weights[rec + corner];
                if w == T::zero() || df.iter().all(|d| *d == T::zero()) {
                    continue;
                }
                let abs = record.rows[rec + corner] as usize;
                let key = (abs / cfg.table_size, abs % cfg.table_size);
                let e = out.entry(key).or_insert_with(|| vec![T::zero(); feats]);
                for (g, &d) in e.iter_mut().zip(df) {
                    *g += w * d;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn small_config() -> HashGridConfig {
        HashGridConfig { levels: 3, table_size: 1 << 8, features: 2, base_resolution: 2, max_resolution: 16 }
    }

    #[test]
    fn default_levels() {
        let c = HashGridConfig::default();
        c.validate().unwrap();
        assert_eq!(c.resolution(0), 16);
        assert_eq!(c.resolution(7), 256);
        assert!((c.growth_factor() - 16f64.powf(1.0 / 7.0)).abs() < 1e-12);
        assert_eq!(c.output_width(), 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = HashGridConfig::default();
        c.table_size = 1000;
        assert!(c.validate().is_err());
        let mut c = HashGridConfig::default();
        c.base_resolution = 512;
        assert!(c.validate().is_err());
        let mut c = HashGridConfig::default();
        c.levels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dense_indices() {
        assert_eq!(cell_index([0, 0, 0], 4, 1 << 10), 0);
        // row-major over 5 vertices per axis: 1 + 2*5 + 3*25
        assert_eq!(cell_index([1, 2, 3], 4, 1 << 10), 86);
    }

    #[test]
    fn hashed_indices_stay_in_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1_000_000 {
            let c = [rng.random_range(0..=512), rng.random_range(0..=512), rng.random_range(0..=512)];
            assert!(cell_index(c, 512, 1 << 15) < 1 << 15);
        }
        assert_eq!(cell_index([3, 5, 7], 512, 1 << 15), cell_index([3, 5, 7], 512, 1 << 15));
    }

    #[test]
    fn vertex_position_reads_its_row() {
        let cfg = small_config();
        let tables = HashTables::<f64>::init(cfg, 4).unwrap();
        // 0.5 is a vertex on every level (resolutions 2, 5->?); use level 0 only
        let p = [0.5, 0.5, 0.0];
        let (feat, _) = encode(&[p], &tables).unwrap();
        let res = cfg.resolution(0);
        let cell = [res / 2, res / 2, 0];
        let row = tables.row(0, cell_index(cell, res, cfg.table_size));
        assert!((feat.data[0] - row[0]).abs() < 1e-15);
        assert!((feat.data[1] - row[1]).abs() < 1e-15);
    }

    #[test]
    fn edge_midpoint_averages_endpoints() {
        let cfg = HashGridConfig { levels: 1, table_size: 1 << 8, features: 2, base_resolution: 4, max_resolution: 4 };
        let tables = HashTables::<f64>::init(cfg, 5).unwrap();
        // midpoint of the edge between vertices (1,2,3) and (2,2,3) at resolution 4
        let p = [1.5 / 4.0, 2.0 / 4.0, 3.0 / 4.0];
        let (feat, _) = encode(&[p], &tables).unwrap();
        let a = tables.row(0, cell_index([1, 2, 3], 4, cfg.table_size));
        let b = tables.row(0, cell_index([2, 2, 3], 4, cfg.table_size));
        for f in 0..2 {
            assert!((feat.data[f] - 0.5 * (a[f] + b[f])).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let tables = HashTables::<f32>::zeros(small_config()).unwrap();
        let (feat, _) = encode(&[[0.3, 0.7, 0.1]], &tables).unwrap();
        assert!(feat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_cube_rejected() {
        let tables = HashTables::<f32>::zeros(small_config()).unwrap();
        assert!(encode(&[[1.01, 0.5, 0.5]], &tables).is_err());
        assert!(encode(&[[f32::NAN, 0.5, 0.5]], &tables).is_err());
        assert!(encode(&[[1.0, 0.0, 1.0]], &tables).is_ok());
    }

    #[test]
    fn zero_feature_grads_give_empty_gradient() {
        let tables = HashTables::<f64>::init(small_config(), 1).unwrap();
        let (_, rec) = encode(&[[0.3, 0.2, 0.9]], &tables).unwrap();
        let g = encode_backward(&rec, &Matrix::zeros(1, 6)).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn vertex_gradient_lands_on_one_row_per_level() {
        let cfg = small_config();
        let tables = HashTables::<f64>::init(cfg, 1).unwrap();
        let (_, rec) = encode(&[[0.0, 0.5, 1.0]], &tables).unwrap();
        let d = Matrix { rows: 1, cols: 6, data: vec![1.0; 6] };
        let g = encode_backward(&rec, &d).unwrap();
        // 0.5 is a vertex of even resolutions only; count rows at level 0 (res 2)
        let level0: Vec<_> = g.keys().filter(|k| k.0 == 0).collect();
        assert_eq!(level0.len(), 1);
        assert_eq!(g[level0[0]], vec![1.0, 1.0]);
    }

    #[test]
    fn table_gradients_match_finite_differences() {
        let cfg = small_config();
        let tables = HashTables::<f64>::init(cfg, 2).unwrap();
        let positions = [[0.31, 0.77, 0.12], [0.64, 0.05, 0.93]];
        let dfeat = Matrix { rows: 2, cols: 6, data: vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.9, 1.1, 0.2, -0.7, 0.5, 1.4, -2.2] };
        let loss = |t: &HashTables<f64>| -> f64 {
            let (f, _) = encode(&positions, t).unwrap();
            f.data.iter().zip(&dfeat.data).map(|(a, b)| a * b).sum()
        };
        let (_, rec) = encode(&positions, &tables).unwrap();
        let mut dense = vec![0.0; cfg.parameter_count()];
        encode_backward_into(&rec, &dfeat, &mut dense).unwrap();
        let sparse = encode_backward(&rec, &dfeat).unwrap();
        let h = 1e-5;
        for (&(l, row), g) in &sparse {
            for f in 0..cfg.features {
                let idx = (l * cfg.table_size + row) * cfg.features + f;
                let mut plus = tables.clone();
                plus.data[idx] += h;
                let mut minus = tables.clone();
                minus.data[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((fd - g[f]).abs() <= 1e-4 * fd.abs().max(1e-8));
                assert!((dense[idx] - g[f]).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(x in 0.0f64..=1.0, y in 0.0f64..=1.0, z in 0.0f64..=1.0) {
            let tables = HashTables::<f64>::zeros(HashGridConfig::default()).unwrap();
            let (_, rec) = encode(&[[x, y, z]], &tables).unwrap();
            for l in 0..8 {
                let s: f64 = rec.weights[l * 8..(l + 1) * 8].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn encoding_is_continuous(x in 0.0f64..0.999, y in 0.0f64..0.999, z in 0.0f64..0.999, seed in 0u64..50) {
            let tables = HashTables::<f64>::init(HashGridConfig::default(), seed).unwrap();
            let (a, _) = encode(&[[x, y, z]], &tables).unwrap();
            let (b, _) = encode(&[[x + 1e-6, y + 1e-6, z + 1e-6]], &tables).unwrap();
            let diff: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff < 1e-3);
        }
    }
}
