use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::Real;

/// Half-width of the uniform initialization interval, `1/sqrt(32)`.
pub const INIT_BOUND: f64 = 0.176_776_695_296_636_9;

/// Row-major batch of vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!("matrix data has {} entries, expected {rows}x{cols}", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// All weights and biases of a dense network in one flat buffer.
///
/// Layer `l` maps `widths[l]` inputs to `widths[l + 1]` outputs; its weights
/// are stored row-major as `out x in`, followed by its `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    offsets: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    /// Zero-valued parameters: rectified-linear hidden layers, identity output.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return invalid(format!("layer widths {widths:?} need at least two positive entries"));
        }
        let n_layers = widths.len() - 1;
        let activations = (0..n_layers)
            .map(|l| if l + 1 == n_layers { Activation::Identity } else { Activation::Relu })
            .collect();
        let mut offsets = Vec::with_capacity(n_layers + 1);
        let mut total = 0;
        for l in 0..n_layers {
            offsets.push(total);
            total += widths[l] * widths[l + 1] + widths[l + 1];
        }
        offsets.push(total);
        Ok(Self { widths: widths.to_vec(), activations, offsets, data: vec![T::zero(); total] })
    }

    pub fn with_activations(mut self, activations: &[Activation]) -> Result<Self> {
        if activations.len() != self.layer_count() {
            return invalid("one activation per layer required");
        }
        self.activations = activations.to_vec();
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn split(&self, l: usize) -> (usize, usize, usize) {
        let (inp, out) = (self.widths[l], self.widths[l + 1]);
        (self.offsets[l], self.offsets[l] + inp * out, self.offsets[l + 1])
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let (a, b, c) = self.split(l);
        (&self.data[a..b], &self.data[b..c])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let (a, b, c) = self.split(l);
        let (w, rest) = self.data[a..c].split_at_mut(b - a);
        (w, rest)
    }

    pub fn same_shape(&self, other: &MlpParams<T>) -> bool {
        self.widths == other.widths
    }

    pub fn cast<U: Real>(&self) -> MlpParams<U> {
        MlpParams {
            widths: self.widths.clone(),
            activations: self.activations.clone(),
            offsets: self.offsets.clone(),
            data: self.data.iter().map(|v| U::lit(v.f64())).collect(),
        }
    }
}

/// Uniform initialization in `[-1/sqrt(32), 1/sqrt(32)]` for every weight
/// and bias, deterministic in `seed`.
pub fn mlp_init<T: Real>(widths: &[usize], seed: u64) -> Result<MlpParams<T>> {
    let mut params = MlpParams::zeros(widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.data.iter_mut() {
        *v = T::lit(rng.random_range(-INIT_BOUND..=INIT_BOUND));
    }
    Ok(params)
}

/// Activations of one forward batch. `values[0]` is the input and
/// `values[l + 1]` the post-activation output of layer `l`; rectified-linear
/// masks are recovered from the positive entries.
#[derive(Clone, Debug)]
pub struct GradientTape<T> {
    widths: Vec<usize>,
    pub values: Vec<Matrix<T>>,
}

impl<T: Real> GradientTape<T> {
    pub fn batch(&self) -> usize {
        self.values[0].rows
    }

    pub fn output(&self) -> &Matrix<T> {
        self.values.last().unwrap()
    }
}

pub fn mlp_forward<T: Real>(params: &MlpParams<T>, inputs: Matrix<T>) -> Result<GradientTape<T>> {
    if inputs.cols != params.input_width() {
        return invalid(format!(
            "input width {} does not match first layer width {}",
            inputs.cols,
            params.input_width()
        ));
    }
    let batch = inputs.rows;
    let mut values = Vec::with_capacity(params.layer_count() + 1);
    values.push(inputs);
    for l in 0..params.layer_count() {
        let (inp, out) = (params.widths[l], params.widths[l + 1]);
        let (w, b) = params.layer(l);
        let mut z = Matrix::zeros(batch, out);
        for r in 0..batch {
            z.row_mut(r).copy_from_slice(b);
        }
        let x = values.last().unwrap();
        // z = x * w^T + b
        T::gemm(batch, inp, out, T::one(), &x.data, inp as isize, 1, w, 1, inp as isize, T::one(), &mut z.data, out as isize, 1);
        if params.activations[l] == Activation::Relu {
            for v in z.data.iter_mut() {
                if !(*v > T::zero()) {
                    *v = T::zero();
                }
            }
        }
        values.push(z);
    }
    Ok(GradientTape { widths: params.widths.clone(), values })
}

/// Accumulates parameter gradients into `param_grads` and returns the input
/// gradients for the loss implied by `output_grads`.
pub fn mlp_backward<T: Real>(
    params: &MlpParams<T>,
    tape: &GradientTape<T>,
    output_grads: &Matrix<T>,
    param_grads: &mut MlpParams<T>,
) -> Result<Matrix<T>> {
    if tape.widths != params.widths || !param_grads.same_shape(params) {
        return invalid("tape or gradient buffer does not match the network");
    }
    let batch = tape.batch();
    if output_grads.rows != batch || output_grads.cols != params.output_width() {
        return invalid(format!(
            "output gradients are {}x{}, expected {}x{}",
            output_grads.rows,
            output_grads.cols,
            batch,
            params.output_width()
        ));
    }
    let mut delta = output_grads.clone();
    for l in (0..params.layer_count()).rev() {
        let (inp, out) = (params.widths[l], params.widths[l + 1]);
        if params.activations[l] == Activation::Relu {
            let a = &tape.values[l + 1];
            for (d, &v) in delta.data.iter_mut().zip(&a.data) {
                if !(v > T::zero()) {
                    *d = T::zero();
                }
            }
        }
        let x = &tape.values[l];
        {
            let (gw, gb) = param_grads.layer_mut(l);
            // gw += delta^T * x
            T::gemm(out, batch, inp, T::one(), &delta.data, 1, out as isize, &x.data, inp as isize, 1, T::one(), gw, inp as isize, 1);
            for r in 0..batch {
                for (g, &d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
        }
        let (w, _) = params.layer(l);
        let mut next = Matrix::zeros(batch, inp);
        // next = delta * w
        T::gemm(batch, out, inp, T::one(), &delta.data, out as isize, 1, w, inp as isize, 1, T::zero(), &mut next.data, inp as isize, 1);
        delta = next;
    }
    Ok(delta)
}
