//! The radiance field: hash features feed a density network whose 16
//! outputs (raw density plus geometry features) feed, together with a
//! spherical-harmonics direction encoding, a color network.

use serde::{Deserialize, Serialize};

use crate::diffnet::{mlp_backward, mlp_forward, mlp_init, GradientTape, Matrix, MlpParams};
use crate::error::{invalid, Result};
use crate::hashenc::{encode, encode_backward_into, HashGridConfig, HashTables, InterpRecord};
use crate::Real;

/// Raw density is clamped to this magnitude before `exp`.
pub const DENSITY_CLAMP: f64 = 15.0;
pub const SH_WIDTH: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub density_hidden: usize,
    /// Density network output width: raw density plus geometry features.
    pub density_out: usize,
    pub color_hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { grid: HashGridConfig::default(), density_hidden: 64, density_out: 16, color_hidden: 64 }
    }
}

impl FieldConfig {
    pub fn density_widths(&self) -> Vec<usize> {
        vec![self.grid.output_width(), self.density_hidden, self.density_out]
    }

    pub fn color_widths(&self) -> Vec<usize> {
        vec![self.density_out + SH_WIDTH, self.color_hidden, self.color_hidden, 3]
    }
}

/// Real spherical harmonics up to degree 2 of a unit direction.
pub fn sh_encode<T: Real>(d: [T; 3]) -> [T; SH_WIDTH] {
    let [x, y, z] = d;
    let c = |v: f64| T::lit(v);
    [
        c(0.282_094_791_773_878_14),
        c(-0.488_602_511_902_919_9) * y,
        c(0.488_602_511_902_919_9) * z,
        c(-0.488_602_511_902_919_9) * x,
        c(1.092_548_430_592_079_2) * x * y,
        c(-1.092_548_430_592_079_2) * y * z,
        c(0.315_391_565_252_520_05) * (c(2.0) * z * z - x * x - y * y),
        c(-1.092_548_430_592_079_2) * x * z,
        c(0.546_274_215_296_039_6) * (x * x - y * y),
    ]
}

pub fn logistic<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Derivative of `logistic` from the pre-activation. Unlike `s * (1 - s)`
/// it stays non-zero once `s` rounds to 1.
pub fn logistic_grad<T: Real>(v: T) -> T {
    logistic(v) * logistic(-v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField<T> {
    pub config: FieldConfig,
    pub tables: HashTables<T>,
    pub density: MlpParams<T>,
    pub color: MlpParams<T>,
}

/// Gradient buffers shaped like a [`RadianceField`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads<T> {
    pub tables: Vec<T>,
    pub density: MlpParams<T>,
    pub color: MlpParams<T>,
}

impl<T: Real> FieldGrads<T> {
    pub fn zeros(config: &FieldConfig) -> Result<Self> {
        Ok(Self {
            tables: vec![T::zero(); config.grid.parameter_count()],
            density: MlpParams::zeros(&config.density_widths())?,
            color: MlpParams::zeros(&config.color_widths())?,
        })
    }

    pub fn clear(&mut self) {
        self.tables.iter_mut().for_each(|v| *v = T::zero());
        self.density.data.iter_mut().for_each(|v| *v = T::zero());
        self.color.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn all_finite(&self) -> bool {
        self.tables.iter().chain(&self.density.data).chain(&self.color.data).all(|v| v.is_finite())
    }
}

/// Everything the density head needs for backward.
#[derive(Clone, Debug)]
pub struct DensityPass<T> {
    pub sigma: Vec<T>,
    pub raw: Vec<T>,
    pub record: InterpRecord<T>,
    pub tape: GradientTape<T>,
}

/// Color head activations for a subset (`keep`) of the density batch.
#[derive(Clone, Debug)]
pub struct ColorPass<T> {
    pub keep: Vec<usize>,
    pub rgb: Vec<[T; 3]>,
    pub tape: GradientTape<T>,
}

impl<T: Real> RadianceField<T> {
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            config,
            tables: HashTables::init(config.grid, seed.wrapping_mul(3).wrapping_add(1))?,
            density: mlp_init(&config.density_widths(), seed.wrapping_mul(3).wrapping_add(2))?,
            color: mlp_init(&config.color_widths(), seed.wrapping_mul(3).wrapping_add(3))?,
        })
    }

    pub fn cast<U: Real>(&self) -> RadianceField<U> {
        RadianceField { config: self.config, tables: self.tables.cast(), density: self.density.cast(), color: self.color.cast() }
    }

    pub fn density_pass(&self, positions: &[[T; 3]]) -> Result<DensityPass<T>> {
        let (features, record) = encode(positions, &self.tables)?;
        let tape = mlp_forward(&self.density, features)?;
        let out = tape.output();
        let lim = T::lit(DENSITY_CLAMP);
        let raw: Vec<T> = (0..out.rows).map(|r| out.data[r * out.cols]).collect();
        let sigma = raw.iter().map(|&v| v.max(-lim).min(lim).exp()).collect();
        Ok(DensityPass { sigma, raw, record, tape })
    }

    /// Color for the density-pass rows listed in `keep`, viewed along the
    /// matching unit `directions`.
    pub fn color_pass(&self, dens: &DensityPass<T>, keep: Vec<usize>, directions: &[[T; 3]]) -> Result<ColorPass<T>> {
        if keep.len() != directions.len() {
            return invalid("one direction per kept sample required");
        }
        let dout = self.config.density_out;
        let width = dout + SH_WIDTH;
        let mut input = Matrix::zeros(keep.len(), width);
        let geo = dens.tape.output();
        for (r, (&i, d)) in keep.iter().zip(directions).enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !((norm - T::one()).abs() <= T::lit(1e-6)) {
                return invalid(format!("direction norm {norm} is not unit"));
            }
            let row = input.row_mut(r);
            row[..dout].copy_from_slice(geo.row(i));
            row[dout..].copy_from_slice(&sh_encode(*d));
        }
        let tape = mlp_forward(&self.color, input)?;
        let out = tape.output();
        let rgb = (0..out.rows).map(|r| [logistic(out.data[r * 3]), logistic(out.data[r * 3 + 1]), logistic(out.data[r * 3 + 2])]).collect();
        Ok(ColorPass { keep, rgb, tape })
    }

    pub fn query_density(&self, positions: &[[T; 3]]) -> Result<(Vec<T>, DensityPass<T>)> {
        let pass = self.density_pass(positions)?;
        Ok((pass.sigma.clone(), pass))
    }

    pub fn query_radiance(
        &self,
        positions: &[[T; 3]],
        directions: &[[T; 3]],
    ) -> Result<(Vec<T>, Vec<[T; 3]>, DensityPass<T>, ColorPass<T>)> {
        if positions.len() != directions.len() {
            return invalid("positions and directions differ in length");
        }
        let dens = self.density_pass(positions)?;
        let color = self.color_pass(&dens, (0..positions.len()).collect(), directions)?;
        Ok((dens.sigma.clone(), color.rgb.clone(), dens, color))
    }

    /// Accumulates gradients given `dL/dsigma` for every density-pass row
    /// and `dL/drgb` for every color-pass row.
    pub fn backward(
        &self,
        dens: &DensityPass<T>,
        color: Option<(&ColorPass<T>, &[[T; 3]])>,
        dsigma: &[T],
        grads: &mut FieldGrads<T>,
    ) -> Result<()> {
        let n = dens.sigma.len();
        if dsigma.len() != n {
            return invalid("one density gradient per sample required");
        }
        let dout = self.config.density_out;
        let lim = T::lit(DENSITY_CLAMP);
        let mut dgeo = Matrix::zeros(n, dout);
        for i in 0..n {
            let raw = dens.raw[i];
            if raw > -lim && raw < lim {
                dgeo.data[i * dout] = dsigma[i] * dens.sigma[i];
            }
        }
        if let Some((cp, drgb)) = color {
            if drgb.len() != cp.keep.len() {
                return invalid("one color gradient per kept sample required");
            }
            let out = cp.tape.output();
            let mut dlogit = Matrix::zeros(out.rows, 3);
            for r in 0..out.rows {
                for c in 0..3 {
                    dlogit.data[r * 3 + c] = drgb[r][c] * logistic_grad(out.data[r * 3 + c]);
                }
            }
            let dinput = mlp_backward(&self.color, &cp.tape, &dlogit, &mut grads.color)?;
            for (r, &i) in cp.keep.iter().enumerate() {
                let src = &dinput.row(r)[..dout];
                for (d, &s) in dgeo.row_mut(i).iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let dfeat = mlp_backward(&self.density, &dens.tape, &dgeo, &mut grads.density)?;
        encode_backward_into(&dens.record, &dfeat, &mut grads.tables)
    }

    pub fn parameter_count(&self) -> usize {
        self.tables.data.len() + self.density.len() + self.color.len()
    }
}
