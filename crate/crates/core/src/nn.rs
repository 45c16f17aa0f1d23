//! Dense layers with hand-written backward passes.
//!
//! Activations are row-major `rows x features`; every backward accumulates
//! parameter gradients into a same-shaped gradient struct.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::real::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_init<F: Real, R: Rng>(shape: (usize, usize), fan_in: usize, rng: &mut R) -> Array2<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || F::lit(rng.random_range(-bound..=bound)))
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_init((input, output), input, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulate parameter gradients; returns the input gradient.
    pub fn backward(&self, x: ArrayView2<F>, dy: &Array2<F>, grad: &mut Linear<F>) -> Array2<F> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    pub fn backward_params(&self, x: ArrayView2<F>, dy: &Array2<F>, grad: &mut Linear<F>) {
        general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

/// Layer normalization over the feature axis with learnable gain and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = F::lit(x.ncols() as f64);
        let eps = F::lit(LAYER_NORM_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        Zip::from(xhat.rows_mut())
            .and(&mut inv_std)
            .for_each(|mut row, is| {
                let mean = row.sum() / d;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|&v| v * v).sum::<F>() / d;
                let s = F::one() / (var + eps).sqrt();
                row.mapv_inplace(|v| v * s);
                *is = s;
            });
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Array2<F>, grad: &mut LayerNorm<F>) -> Array2<F> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = F::lit(dy.ncols() as f64);
        let mut dx = dy * &self.gamma;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut g, xh, &s| {
                let sum_g = g.sum();
                let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
                Zip::from(&mut g).and(&xh).for_each(|gi, &xi| {
                    *gi = s * (*gi - sum_g / d - xi * sum_gx / d);
                });
            });
        dx
    }
}

/// Kernel-3 same-padded convolution along the patch axis with the patch
/// positions as channels. Input rows are `(instance, patch)` pairs grouped in
/// blocks of `patches` consecutive rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchConv<F> {
    /// `3P x P`: taps for patch n-1, n, n+1 stacked along the input axis.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

pub const CONV_KERNEL: usize = 3;

impl<F: Real> PatchConv<F> {
    pub fn zeros(channels: usize) -> Self {
        Self {
            weight: Array2::zeros((CONV_KERNEL * channels, channels)),
            bias: Array1::zeros(channels),
        }
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let fan_in = CONV_KERNEL * channels;
        Self {
            weight: uniform_init((fan_in, channels), fan_in, rng),
            bias: Array1::zeros(channels),
        }
    }

    fn im2col(x: ArrayView2<F>, patches: usize) -> Array2<F> {
        let p = x.ncols();
        let mut col = Array2::zeros((x.nrows(), CONV_KERNEL * p));
        for (r, mut out) in col.rows_mut().into_iter().enumerate() {
            let n = r % patches;
            if n > 0 {
                out.slice_mut(ndarray::s![0..p]).assign(&x.row(r - 1));
            }
            out.slice_mut(ndarray::s![p..2 * p]).assign(&x.row(r));
            if n + 1 < patches {
                out.slice_mut(ndarray::s![2 * p..3 * p]).assign(&x.row(r + 1));
            }
        }
        col
    }

    pub fn forward(&self, x: ArrayView2<F>, patches: usize) -> (Array2<F>, Array2<F>) {
        let col = Self::im2col(x, patches);
        let mut y = col.dot(&self.weight);
        y += &self.bias;
        (y, col)
    }

    pub fn backward(&self, col: &Array2<F>, dy: &Array2<F>, patches: usize, grad: &mut PatchConv<F>) -> Array2<F> {
        general_mat_mul(F::one(), &col.t(), dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        let dcol = dy.dot(&self.weight.t());
        let p = dy.ncols();
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dx.nrows() {
            let n = r % patches;
            let g = dcol.row(r);
            {
                let mut row = dx.row_mut(r);
                row += &g.slice(ndarray::s![p..2 * p]);
            }
            if n > 0 {
                let mut row = dx.row_mut(r - 1);
                row += &g.slice(ndarray::s![0..p]);
            }
            if n + 1 < patches {
                let mut row = dx.row_mut(r + 1);
                row += &g.slice(ndarray::s![2 * p..3 * p]);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    half * x * (F::one() + (k * (x + F::lit(GELU_C) * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    let u = k * (x + F::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = k * (F::one() + F::lit(3.0 * GELU_C) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Backward of row softmax given its output `p` and upstream gradient.
pub fn softmax_rows_backward<F: Real>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut out = dp.clone();
    Zip::from(out.rows_mut()).and(p.rows()).for_each(|mut g, pr| {
        let dot = g.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<F>();
        Zip::from(&mut g).and(&pr).for_each(|gi, &pi| *gi = pi * (*gi - dot));
    });
    out
}
