//! Deterministic tensor shaping between the data and the branch backbones:
//! instance normalization, EMA season/trend split, patching and average pooling.
//!
//! Each operation has a single-series form and a row-batched form (one row per
//! channel instance) used by the model, together with its backward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::real::Real;

pub const REVIN_EPS: f64 = 1e-5;

/// Learnable per-channel affine terms of the instance normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinAffine<F> {
    pub scale: Array1<F>,
    pub shift: Array1<F>,
}

impl<F: Real> RevinAffine<F> {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Per-channel statistics of one lookback window.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinStats<F> {
    pub mean: Array1<F>,
    pub std: Array1<F>,
    pub eps: F,
}

impl<F: Real> RevinStats<F> {
    /// `std + eps`, the divisor used by normalization.
    pub fn denom(&self, c: usize) -> F {
        self.std[c] + self.eps
    }
}

/// Mean and population standard deviation of every row.
pub fn row_moments<F: Real>(x: ArrayView2<F>) -> (Array1<F>, Array1<F>) {
    let n = F::lit(x.ncols() as f64);
    let mean = x.sum_axis(Axis(1)) / n;
    let mut std = Array1::zeros(x.nrows());
    Zip::from(&mut std)
        .and(x.rows())
        .and(&mean)
        .for_each(|s, row, &m| {
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / n;
            *s = var.sqrt();
        });
    (mean, std)
}

/// Normalize an `L x C` window per channel: `scale * (x - mean) / (std + eps) + shift`.
pub fn revin_normalize<F: Real>(
    window: ArrayView2<F>,
    affine: &RevinAffine<F>,
) -> Result<(Array2<F>, RevinStats<F>)> {
    if window.nrows() < 2 {
        return Err(Error::InvalidArgument("instance normalization needs L >= 2".into()));
    }
    if window.ncols() != affine.channels() {
        return Err(Error::Shape(format!(
            "window has {} channels, affine has {}",
            window.ncols(),
            affine.channels()
        )));
    }
    let (mean, std) = row_moments(window.t());
    let stats = RevinStats {
        mean,
        std,
        eps: F::lit(REVIN_EPS),
    };
    let mut out = window.to_owned();
    for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let (m, d) = (stats.mean[c], stats.denom(c));
        let (a, b) = (affine.scale[c], affine.shift[c]);
        col.mapv_inplace(|v| a * (v - m) / d + b);
    }
    Ok((out, stats))
}

/// Exact inverse of [`revin_normalize`] applied to a `T x C` output.
pub fn revin_denormalize<F: Real>(
    series: ArrayView2<F>,
    stats: &RevinStats<F>,
    affine: &RevinAffine<F>,
) -> Result<Array2<F>> {
    if series.ncols() != stats.mean.len() || series.ncols() != affine.channels() {
        return Err(Error::Shape(format!(
            "series has {} channels, stats {} and affine {}",
            series.ncols(),
            stats.mean.len(),
            affine.channels()
        )));
    }
    let mut out = series.to_owned();
    for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let (m, d) = (stats.mean[c], stats.denom(c));
        let (a, b) = (affine.scale[c], affine.shift[c]);
        col.mapv_inplace(|v| (v - b) / a * d + m);
    }
    Ok(out)
}

/// Trend/seasonal split of one series. `trend + seasonal == input`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<F> {
    pub trend: Vec<F>,
    pub seasonal: Vec<F>,
    pub ema_alpha: F,
}

fn check_alpha<F: Real>(alpha: F) -> Result<()> {
    if !(alpha > F::zero() && alpha <= F::one()) {
        return Err(Error::InvalidArgument(format!(
            "EMA alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// Exponential moving average trend with residual seasonal component.
pub fn ema_decompose<F: Real>(x: &[F], alpha: F) -> Result<Decomposition<F>> {
    check_alpha(alpha)?;
    let mut trend = Vec::with_capacity(x.len());
    let mut prev = F::zero();
    for (t, &v) in x.iter().enumerate() {
        prev = if t == 0 {
            v
        } else {
            prev + alpha * (v - prev)
        };
        trend.push(prev);
    }
    let seasonal = x.iter().zip(&trend).map(|(&v, &tr)| v - tr).collect();
    Ok(Decomposition {
        trend,
        seasonal,
        ema_alpha: alpha,
    })
}

/// EMA trend of every row.
pub fn ema_trend_rows<F: Real>(x: ArrayView2<F>, alpha: F) -> Array2<F> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for t in 1..row.len() {
            row[t] = row[t - 1] + alpha * (row[t] - row[t - 1]);
        }
    }
    out
}

/// Vector-Jacobian product of [`ema_trend_rows`].
pub fn ema_trend_rows_backward<F: Real>(grad_trend: &Array2<F>, alpha: F) -> Array2<F> {
    let beta = F::one() - alpha;
    let mut acc = grad_trend.clone();
    let mut dx = Array2::zeros(grad_trend.raw_dim());
    for (mut g, mut d) in acc.rows_mut().into_iter().zip(dx.rows_mut()) {
        let n = g.len();
        for t in (1..n).rev() {
            d[t] = alpha * g[t];
            let carry = beta * g[t];
            g[t - 1] += carry;
        }
        if n > 0 {
            d[0] = g[0];
        }
    }
    dx
}

/// `floor((L - P) / S_t) + 2`.
pub fn patch_count(lookback: usize, patch_len: usize, stride: usize) -> usize {
    (lookback - patch_len) / stride + 2
}

/// Patches of one series, `N x P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<F> {
    pub data: Array2<F>,
    pub patch_len: usize,
    pub stride: usize,
}

impl<F> PatchGrid<F> {
    pub fn count(&self) -> usize {
        self.data.nrows()
    }
}

fn check_patch(len: usize, patch_len: usize, stride: usize) -> Result<()> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch length and stride must be >= 1".into()));
    }
    if patch_len > len {
        return Err(Error::InvalidArgument(format!(
            "patch length {patch_len} exceeds series length {len}"
        )));
    }
    Ok(())
}

/// Source index of every patch element, flattened `(n, p)` row-major.
///
/// The series is padded at the end by repeating its last value `stride` times,
/// so indices past the end clamp to `len - 1`.
pub fn patch_source_index(len: usize, patch_len: usize, stride: usize) -> Result<Vec<usize>> {
    check_patch(len, patch_len, stride)?;
    let n = patch_count(len, patch_len, stride);
    let mut idx = Vec::with_capacity(n * patch_len);
    for i in 0..n {
        for p in 0..patch_len {
            idx.push((i * stride + p).min(len - 1));
        }
    }
    Ok(idx)
}

/// Split `x` into overlapping patches after end-replication padding.
pub fn patch<F: Real>(x: &[F], patch_len: usize, stride: usize) -> Result<PatchGrid<F>> {
    let idx = patch_source_index(x.len(), patch_len, stride)?;
    let n = idx.len() / patch_len;
    let data = Array2::from_shape_vec((n, patch_len), idx.iter().map(|&i| x[i]).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(PatchGrid {
        data,
        patch_len,
        stride,
    })
}

/// Non-overlapping mean pooling with kernel and stride `k`.
pub fn avgpool_downsample<F: Real>(x: &[F], k: usize) -> Result<Vec<F>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("pooling factor must be >= 2, got {k}")));
    }
    if !x.len().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "pooling factor {k} does not divide length {}",
            x.len()
        )));
    }
    let kf = F::lit(k as f64);
    Ok(x.chunks(k).map(|c| c.iter().copied().sum::<F>() / kf).collect())
}

/// Row-wise mean pooling over columns; `k` must divide the column count.
pub fn avgpool_rows<F: Real>(x: ArrayView2<F>, k: usize) -> Array2<F> {
    let out_len = x.ncols() / k;
    let kf = F::lit(k as f64);
    let mut out = Array2::zeros((x.nrows(), out_len));
    for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
        for j in 0..out_len {
            let mut s = F::zero();
            for i in 0..k {
                s += row[j * k + i];
            }
            o[j] = s / kf;
        }
    }
    out
}

pub fn avgpool_rows_backward<F: Real>(grad: &Array2<F>, k: usize) -> Array2<F> {
    let kf = F::lit(k as f64);
    let mut out = Array2::zeros((grad.nrows(), grad.ncols() * k));
    for (g, mut o) in grad.rows().into_iter().zip(out.rows_mut()) {
        for j in 0..g.len() {
            let v = g[j] / kf;
            for i in 0..k {
                o[j * k + i] = v;
            }
        }
    }
    out
}

/// Smallest multiple of `k` not below `len`.
pub fn padded_len(len: usize, k: usize) -> usize {
    len.div_ceil(k) * k
}

/// Pad every row to a multiple of `k` by repeating its last value.
pub fn pad_rows_to_multiple<F: Real>(x: ArrayView2<F>, k: usize) -> Array2<F> {
    let target = padded_len(x.ncols(), k);
    let last = x.ncols() - 1;
    Array2::from_shape_fn((x.nrows(), target), |(r, j)| x[[r, j.min(last)]])
}

pub fn pad_rows_backward<F: Real>(grad: &Array2<F>, len: usize) -> Array2<F> {
    let mut out = Array2::zeros((grad.nrows(), len));
    for (g, mut o) in grad.rows().into_iter().zip(out.rows_mut()) {
        for (j, &v) in g.iter().enumerate() {
            o[j.min(len - 1)] += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn revin_standardizes_window() {
        let w = array![[1.0f64], [2.0], [3.0]];
        let (out, stats) = revin_normalize(w.view(), &RevinAffine::identity(1)).unwrap();
        assert!(out.sum().abs() < 1e-12);
        let (_, std) = row_moments(out.t());
        assert!((std[0] - 1.0).abs() < 1e-4);
        assert_eq!(stats.mean[0], 2.0);
    }

    #[test]
    fn revin_constant_window_is_zero() {
        let w = array![[7.0f64], [7.0], [7.0]];
        let (out, stats) = revin_normalize(w.view(), &RevinAffine::identity(1)).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        let back = revin_denormalize(out.view(), &stats, &RevinAffine::identity(1)).unwrap();
        assert!(back.iter().all(|v| (*v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn revin_rejects_channel_mismatch() {
        let w = array![[1.0f64, 2.0], [2.0, 3.0]];
        let (out, stats) = revin_normalize(w.view(), &RevinAffine::identity(2)).unwrap();
        assert!(revin_denormalize(out.view(), &stats, &RevinAffine::identity(3)).is_err());
        assert!(revin_denormalize(out.column(0).insert_axis(Axis(1)), &stats, &RevinAffine::identity(2)).is_err());
    }

    #[test]
    fn ema_hand_example() {
        let d = ema_decompose(&[0.0f64, 1.0], 0.5).unwrap();
        assert_eq!(d.trend, vec![0.0, 0.5]);
        assert_eq!(d.seasonal, vec![0.0, 0.5]);
    }

    #[test]
    fn ema_fixed_points() {
        let d = ema_decompose(&[3.0f64; 4], 0.3).unwrap();
        assert_eq!(d.trend, vec![3.0; 4]);
        assert!(d.seasonal.iter().all(|v| *v == 0.0));
        let x = [1.0f64, -2.0, 5.0];
        let d = ema_decompose(&x, 1.0).unwrap();
        assert_eq!(d.trend, x.to_vec());
        assert!(ema_decompose(&x, 0.0).is_err());
        assert!(ema_decompose(&x, 1.5).is_err());
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patch_count(512, 16, 8), 64);
        let g = patch(&[1.0f64, 2., 3., 4., 5., 6.], 2, 2).unwrap();
        assert_eq!(g.data, array![[1., 2.], [3., 4.], [5., 6.], [6., 6.]]);
        let g = patch(&[1.0f64, 2., 3.], 3, 1).unwrap();
        assert_eq!(g.data, array![[1., 2., 3.], [2., 3., 3.]]);
        assert!(patch(&[1.0f64, 2.], 3, 1).is_err());
    }

    #[test]
    fn avgpool_examples() {
        assert_eq!(avgpool_downsample(&[1.0f64, 3., 5., 7.], 2).unwrap(), vec![2., 6.]);
        assert_eq!(avgpool_downsample(&[1.0f64, 2., 3., 4., 5., 6.], 3).unwrap(), vec![2., 5.]);
        assert_eq!(avgpool_downsample(&[4.0f64; 6], 3).unwrap(), vec![4., 4.]);
        assert!(avgpool_downsample(&[1.0f64, 2., 3.], 2).is_err());
        assert!(avgpool_downsample(&[1.0f64, 2.], 1).is_err());
    }

    #[test]
    fn padding_replicates_last_value() {
        let x = array![[1.0f64, 2.0, 3.0]];
        let p = pad_rows_to_multiple(x.view(), 2);
        assert_eq!(p, array![[1.0, 2.0, 3.0, 3.0]]);
        let g = pad_rows_backward(&array![[1.0f64, 1.0, 1.0, 1.0]], 3);
        assert_eq!(g, array![[1.0, 1.0, 2.0]]);
    }

    #[test]
    fn ema_backward_matches_dense_jacobian() {
        let alpha = 0.3;
        let n = 6;
        // column j of the Jacobian is the trend response to a unit impulse at j
        let mut jac = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut e = Array2::zeros((1, n));
            e[[0, j]] = 1.0;
            jac.column_mut(j).assign(&ema_trend_rows(e.view(), alpha).row(0));
        }
        let g = array![[0.3, -1.0, 2.0, 0.5, 0.0, 1.5]];
        let expect = g.dot(&jac);
        let got = ema_trend_rows_backward(&g, alpha);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn decomposition_is_exact(x in prop::collection::vec(-100.0f64..100.0, 1..64), alpha in 0.01f64..1.0) {
            let d = ema_decompose(&x, alpha).unwrap();
            for i in 0..x.len() {
                prop_assert!((d.trend[i] + d.seasonal[i] - x[i]).abs() <= 1e-12 * x[i].abs().max(1.0));
            }
        }

        #[test]
        fn revin_round_trip(
            vals in prop::collection::vec(-50.0f64..50.0, 8),
            scale in prop::sample::select(vec![-2.0f64, -0.5, 0.3, 1.0, 4.0]),
            shift in -3.0f64..3.0,
        ) {
            let w = Array2::from_shape_vec((4, 2), vals).unwrap();
            let affine = RevinAffine { scale: array![scale, 1.0], shift: array![shift, 0.0] };
            let (n, stats) = revin_normalize(w.view(), &affine).unwrap();
            let back = revin_denormalize(n.view(), &stats, &affine).unwrap();
            for (a, b) in back.iter().zip(w.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn patches_cover_input(len in 4usize..80, p in 2usize..8) {
            prop_assume!(p % 2 == 0 && p <= len);
            let stride = p / 2;
            let idx = patch_source_index(len, p, stride).unwrap();
            let mut hits = vec![0usize; len];
            for &i in &idx { hits[i] += 1; }
            prop_assert!(hits.iter().all(|&h| h >= 1));
            // interior elements (away from the first half-patch and the padded tail) appear twice
            let full = (len - p) / stride * stride + p;
            for i in stride..full.saturating_sub(stride) {
                prop_assert_eq!(hits[i], 2);
            }
        }

        #[test]
        fn pooling_preserves_mean(x in prop::collection::vec(-10.0f64..10.0, 1..10), k in 2usize..5) {
            let mut v = Vec::new();
            for _ in 0..k { v.extend_from_slice(&x); }
            let pooled = avgpool_downsample(&v, k).unwrap();
            let m1 = v.iter().sum::<f64>() / v.len() as f64;
            let m2 = pooled.iter().sum::<f64>() / pooled.len() as f64;
            prop_assert!((m1 - m2).abs() < 1e-9);
        }
    }
}
