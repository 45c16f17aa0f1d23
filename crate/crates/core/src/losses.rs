//! Training objective: decay-weighted L1 prediction loss, intra-scale and
//! cross-scale consistency losses, and their weighted total.
//!
//! Public functions take one window laid out `steps x channels`. The batched
//! kernels used by the trainer work on `rows x steps` matrices where every row
//! is one channel of one window.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::transform::{avgpool_rows, pad_rows_to_multiple};

/// Per-step weights of the prediction loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DecaySchedule {
    pub theta: Vec<f64>,
    pub shape: f64,
}

/// `theta[i] = 1 - (2/pi) * atan(c * i / T)`.
pub fn theta_decay(horizon: usize, shape: f64) -> Result<DecaySchedule> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "decay shape must be positive, got {shape}"
        )));
    }
    let t = horizon as f64;
    let theta = (0..horizon)
        .map(|i| 1.0 - std::f64::consts::FRAC_2_PI * (shape * i as f64 / t).atan())
        .collect();
    Ok(DecaySchedule { theta, shape })
}

impl DecaySchedule {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn cast<F: Real>(&self) -> Vec<F> {
        self.theta.iter().map(|&v| F::lit(v)).collect()
    }
}

/// Weights of the auxiliary terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be a nonnegative number, got {v}"
                )));
            }
        }
        Ok(Self { alpha, beta, gamma })
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_p: f64,
    pub l_f: f64,
    pub l_c: f64,
    pub l_t: f64,
}

impl LossTerms {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            l_p: self.l_p * s,
            l_f: self.l_f * s,
            l_c: self.l_c * s,
            l_t: self.l_t * s,
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.l_p += other.l_p;
        self.l_f += other.l_f;
        self.l_c += other.l_c;
        self.l_t += other.l_t;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_f: f64,
    pub l_c: f64,
    pub l_t: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(terms: LossTerms, weights: LossWeights) -> Result<LossBreakdown> {
    let weights = LossWeights::new(weights.alpha, weights.beta, weights.gamma)?;
    Ok(LossBreakdown {
        l_p: terms.l_p,
        l_f: terms.l_f,
        l_c: terms.l_c,
        l_t: terms.l_t,
        total: combine(&terms, &weights),
        weights,
    })
}

pub(crate) fn combine(t: &LossTerms, w: &LossWeights) -> f64 {
    t.l_p + w.alpha * t.l_f + w.beta * t.l_c + w.gamma * t.l_t
}

fn same_shape<F>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "loss operands have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1/(T*C)) * sum_i theta[i] * sum_c |truth - pred|` on a `T x C` window.
pub fn prediction_loss(
    truth: ArrayView2<f64>,
    pred: ArrayView2<f64>,
    schedule: &DecaySchedule,
) -> Result<f64> {
    same_shape(&truth, &pred)?;
    if truth.nrows() != schedule.len() {
        return Err(Error::Shape(format!(
            "window has {} steps, decay schedule has {}",
            truth.nrows(),
            schedule.len()
        )));
    }
    let sum = weighted_abs_sum(truth.t(), pred.t(), &schedule.theta);
    Ok(sum / truth.len() as f64)
}

/// `factor * sum |a - b|^2`.
pub fn consistency_loss(a: ArrayView2<f64>, b: ArrayView2<f64>, factor: f64) -> Result<f64> {
    same_shape(&a, &b)?;
    if !(factor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "consistency factor must be positive, got {factor}"
        )));
    }
    Ok(factor * squared_sum(a, b))
}

/// Pool `fine_fused` (`T x C`) by `k` and compare with `coarse` (`T/k x C`).
pub fn cross_scale_loss(coarse: ArrayView2<f64>, fine_fused: ArrayView2<f64>, k: usize) -> Result<f64> {
    let (t, c) = fine_fused.dim();
    if k < 2 || t % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsampling factor {k} must be >= 2 and divide the horizon {t}"
        )));
    }
    if coarse.dim() != (t / k, c) {
        return Err(Error::Shape(format!(
            "coarse output is {:?}, expected {:?}",
            coarse.dim(),
            (t / k, c)
        )));
    }
    let pooled = avgpool_rows(fine_fused.t(), k);
    let factor = k as f64 / (t * c) as f64;
    Ok(factor * squared_sum(coarse.t(), pooled.view()))
}

/// `sum_{r,i} theta[i] * |truth - pred|` on `rows x steps`.
pub(crate) fn weighted_abs_sum<F: Real>(truth: ArrayView2<F>, pred: ArrayView2<F>, theta: &[F]) -> f64 {
    let mut s = 0.0;
    for (tr, pr) in truth.rows().into_iter().zip(pred.rows()) {
        for ((&a, &b), &w) in tr.iter().zip(pr.iter()).zip(theta) {
            s += (w * (b - a).abs()).as_f64();
        }
    }
    s
}

/// Gradient of `scale * weighted_abs_sum` with respect to `pred`; `sign(0) = 0`.
pub(crate) fn weighted_abs_grad<F: Real>(
    truth: ArrayView2<F>,
    pred: ArrayView2<F>,
    theta: &[F],
    scale: F,
) -> Array2<F> {
    let mut g = Array2::zeros(pred.raw_dim());
    for ((mut gr, tr), pr) in g.rows_mut().into_iter().zip(truth.rows()).zip(pred.rows()) {
        for (j, (&a, &b)) in tr.iter().zip(pr.iter()).enumerate() {
            let d = b - a;
            let sign = if d > F::zero() {
                F::one()
            } else if d < F::zero() {
                -F::one()
            } else {
                F::zero()
            };
            gr[j] = scale * theta[j] * sign;
        }
    }
    g
}

pub(crate) fn squared_sum<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> f64 {
    let mut s = 0.0;
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let d = (x - y).as_f64();
        s += d * d;
    });
    s
}

/// Pool fine rows (`rows x T`, padded by repetition when `k` does not divide `T`).
pub(crate) fn pool_fine<F: Real>(fine: ArrayView2<F>, k: usize) -> Array2<F> {
    if fine.ncols().is_multiple_of(k) {
        avgpool_rows(fine, k)
    } else {
        avgpool_rows(pad_rows_to_multiple(fine, k).view(), k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn theta_values() {
        let s = theta_decay(4, 1.0).unwrap();
        let want: Vec<f64> = [0.0f64, 0.25, 0.5, 0.75]
            .iter()
            .map(|x| 1.0 - 2.0 / std::f64::consts::PI * x.atan())
            .collect();
        assert_eq!(s.theta, want);
        assert_eq!(s.theta[0], 1.0);
        assert!(theta_decay(0, 1.0).is_err());
        assert!(theta_decay(4, 0.0).is_err());
    }

    #[test]
    fn prediction_loss_examples() {
        let s1 = theta_decay(1, 1.0).unwrap();
        assert_eq!(prediction_loss(array![[2.0]].view(), array![[3.0]].view(), &s1).unwrap(), 1.0);
        let s2 = theta_decay(2, 1.0).unwrap();
        let l = prediction_loss(array![[0.0], [0.0]].view(), array![[1.0], [-1.0]].view(), &s2).unwrap();
        assert!((l - (1.0 + s2.theta[1]) / 2.0).abs() < 1e-15);
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(prediction_loss(x.view(), x.view(), &s2).unwrap(), 0.0);
        assert!(prediction_loss(x.view(), array![[1.0], [2.0]].view(), &s2).is_err());
    }

    #[test]
    fn consistency_examples() {
        let a = array![[0.0], [0.0]];
        let b = array![[1.0], [1.0]];
        assert_eq!(consistency_loss(a.view(), b.view(), 0.5).unwrap(), 1.0);
        assert_eq!(consistency_loss(a.view(), a.view(), 0.5).unwrap(), 0.0);
        // coarse: T=8, k=4 gives two coarse steps
        let c1 = Array2::from_elem((2, 1), 0.5);
        let c2 = Array2::zeros((2, 1));
        assert_eq!(consistency_loss(c1.view(), c2.view(), 4.0 / 8.0).unwrap(), 0.25);
    }

    #[test]
    fn cross_scale_examples() {
        let fine = array![[1.0], [3.0], [5.0], [7.0]];
        assert_eq!(cross_scale_loss(array![[2.0], [6.0]].view(), fine.view(), 2).unwrap(), 0.0);
        assert_eq!(cross_scale_loss(array![[0.0], [0.0]].view(), fine.view(), 2).unwrap(), 20.0);
        let flat = Array2::from_elem((4, 2), 3.0);
        let coarse = Array2::from_elem((2, 2), 3.0);
        assert_eq!(cross_scale_loss(coarse.view(), flat.view(), 2).unwrap(), 0.0);
        assert!(cross_scale_loss(array![[0.0]].view(), array![[1.0], [2.0], [3.0]].view(), 2).is_err());
    }

    #[test]
    fn total_examples() {
        let t = LossTerms { l_p: 1.0, l_f: 2.0, l_c: 3.0, l_t: 4.0 };
        let b = total_loss(t, LossWeights::new(0.1, 0.1, 0.1).unwrap()).unwrap();
        assert!((b.total - 1.9).abs() < 1e-15);
        let b = total_loss(t, LossWeights::zero()).unwrap();
        assert_eq!(b.total, 1.0);
        let neg = LossWeights { alpha: -0.1, beta: 0.0, gamma: 0.0 };
        assert!(total_loss(t, neg).is_err());
    }

    #[test]
    fn abs_gradient_uses_zero_subgradient() {
        let truth = array![[1.0f64, 2.0, 3.0]];
        let pred = array![[1.0f64, 3.0, 2.0]];
        let g = weighted_abs_grad(truth.view(), pred.view(), &[1.0, 0.5, 0.25], 2.0);
        assert_eq!(g, array![[0.0, 1.0, -0.5]]);
    }

    proptest! {
        #[test]
        fn theta_is_decreasing(t in 1usize..200, c in 0.01f64..10.0) {
            let s = theta_decay(t, c).unwrap();
            prop_assert_eq!(s.theta[0], 1.0);
            for w in s.theta.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            prop_assert!(s.theta.iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn consistency_is_symmetric(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let a = Array2::from_shape_vec((3, 2), a).unwrap();
            let b = Array2::from_shape_vec((3, 2), b).unwrap();
            let ab = consistency_loss(a.view(), b.view(), 1.0 / 6.0).unwrap();
            let ba = consistency_loss(b.view(), a.view(), 1.0 / 6.0).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
        }
    }
}
