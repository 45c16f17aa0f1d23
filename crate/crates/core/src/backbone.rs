//! Per-branch feature extractor.
//!
//! The seasonal stream patches the seasonal residual, mixes along the patch
//! axis with a linear block and a kernel-3 convolution, merges both with the
//! patches residually and decodes with a two-layer MLP. The trend stream is two
//! activation-free linear blocks, each followed by pair pooling and layer norm.
//! Output features are `trend ⊕ seasonal` (`2T`).
//!
//! All batched routines take one row per channel instance.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, PatchConv};
use crate::params::{join, ParamSet, TensorRef};
use crate::real::Real;
use crate::transform::{
    avgpool_rows, avgpool_rows_backward, ema_decompose, patch_count, patch_source_index, PatchGrid,
};

/// Shapes shared by every branch of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchDims {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub hidden: usize,
}

impl BranchDims {
    /// Dimensions with the decoder width set to `2T`.
    pub fn new(lookback: usize, horizon: usize, patch_len: usize, stride: usize) -> Result<Self> {
        if patch_len == 0 || stride == 0 || patch_len > lookback {
            return Err(Error::Config(format!(
                "invalid patching: lookback {lookback}, patch {patch_len}, stride {stride}"
            )));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        Ok(Self {
            lookback,
            horizon,
            patch_len,
            stride,
            hidden: 2 * horizon,
        })
    }

    pub fn patches(&self) -> usize {
        patch_count(self.lookback, self.patch_len, self.stride)
    }

    pub fn features(&self) -> usize {
        2 * self.horizon
    }
}

/// Parameters of one interPDN branch backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<F> {
    /// `N -> N` along the patch-count axis.
    pub patch_linear: Linear<F>,
    pub conv: PatchConv<F>,
    /// `N*P -> H`
    pub decoder_hidden: Linear<F>,
    /// `H -> T`
    pub decoder_out: Linear<F>,
    /// `L -> 2T`
    pub trend_in: Linear<F>,
    pub trend_norm_in: LayerNorm<F>,
    /// `T -> 2T`
    pub trend_mid: Linear<F>,
    pub trend_norm_out: LayerNorm<F>,
}

impl<F: Real> BranchParams<F> {
    pub fn init<R: Rng>(dims: &BranchDims, rng: &mut R) -> Self {
        let n = dims.patches();
        let (p, t) = (dims.patch_len, dims.horizon);
        Self {
            patch_linear: Linear::init(n, n, rng),
            conv: PatchConv::init(p, rng),
            decoder_hidden: Linear::init(n * p, dims.hidden, rng),
            decoder_out: Linear::init(dims.hidden, t, rng),
            trend_in: Linear::init(dims.lookback, 2 * t, rng),
            trend_norm_in: LayerNorm::new(t),
            trend_mid: Linear::init(t, 2 * t, rng),
            trend_norm_out: LayerNorm::new(t),
        }
    }

    pub fn patches(&self) -> usize {
        self.patch_linear.input_dim()
    }

    pub fn patch_len(&self) -> usize {
        self.conv.bias.len()
    }

    pub fn lookback(&self) -> usize {
        self.trend_in.input_dim()
    }

    pub fn horizon(&self) -> usize {
        self.decoder_out.output_dim()
    }
}

impl<F: Real> ParamSet<F> for BranchParams<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        self.patch_linear.visit(&join(prefix, "patch_linear"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.decoder_hidden.visit(&join(prefix, "decoder_hidden"), f);
        self.decoder_out.visit(&join(prefix, "decoder_out"), f);
        self.trend_in.visit(&join(prefix, "trend_in"), f);
        self.trend_norm_in.visit(&join(prefix, "trend_norm_in"), f);
        self.trend_mid.visit(&join(prefix, "trend_mid"), f);
        self.trend_norm_out.visit(&join(prefix, "trend_norm_out"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        self.patch_linear.visit_mut(f);
        self.conv.visit_mut(f);
        self.decoder_hidden.visit_mut(f);
        self.decoder_out.visit_mut(f);
        self.trend_in.visit_mut(f);
        self.trend_norm_in.visit_mut(f);
        self.trend_mid.visit_mut(f);
        self.trend_norm_out.visit_mut(f);
    }
    fn zeros_like(&self) -> Self {
        Self {
            patch_linear: self.patch_linear.zeros_like(),
            conv: self.conv.zeros_like(),
            decoder_hidden: self.decoder_hidden.zeros_like(),
            decoder_out: self.decoder_out.zeros_like(),
            trend_in: self.trend_in.zeros_like(),
            trend_norm_in: self.trend_norm_in.zeros_like(),
            trend_mid: self.trend_mid.zeros_like(),
            trend_norm_out: self.trend_norm_out.zeros_like(),
        }
    }
}

/// Reorder rows of an `(outer*a) x b` matrix into `(outer*b) x a`.
fn swap_inner<F: Real>(x: &Array2<F>, outer: usize, a: usize, b: usize) -> Array2<F> {
    let mut out = Array2::zeros((outer * b, a));
    for o in 0..outer {
        for i in 0..a {
            let src = x.row(o * a + i);
            for j in 0..b {
                out[[o * b + j, i]] = src[j];
            }
        }
    }
    out
}

pub struct SeasonalCache<F> {
    rows: usize,
    /// `(R*P) x N` patches, patch-count axis last.
    patches_t: Array2<F>,
    pre_act: Array2<F>,
    conv_cols: Array2<F>,
    /// `R x (N*P)`
    merged: Array2<F>,
    hidden_pre: Array2<F>,
    hidden: Array2<F>,
}

pub struct TrendCache<F> {
    norm_in_out: Array2<F>,
    norm_in: LayerNormCache<F>,
    norm_out: LayerNormCache<F>,
}

pub struct BranchCache<F> {
    seasonal: SeasonalCache<F>,
    trend: TrendCache<F>,
}

/// Gather `(R*N) x P` patches from `R x L` rows.
pub fn gather_patches<F: Real>(x: ArrayView2<F>, dims: &BranchDims) -> Array2<F> {
    let (n, p) = (dims.patches(), dims.patch_len);
    let idx = patch_source_index(x.ncols(), p, dims.stride).expect("dims validated");
    let mut z = Array2::zeros((x.nrows() * n, p));
    for (r, src) in x.rows().into_iter().enumerate() {
        for i in 0..n {
            let mut dst = z.row_mut(r * n + i);
            for j in 0..p {
                dst[j] = src[idx[i * p + j]];
            }
        }
    }
    z
}

/// Scatter-add patch gradients back onto `R x L` rows.
fn scatter_patches<F: Real>(dz: &Array2<F>, rows: usize, dims: &BranchDims) -> Array2<F> {
    let (n, p) = (dims.patches(), dims.patch_len);
    let idx = patch_source_index(dims.lookback, p, dims.stride).expect("dims validated");
    let mut dx = Array2::zeros((rows, dims.lookback));
    for r in 0..rows {
        let mut dst = dx.row_mut(r);
        for i in 0..n {
            let src = dz.row(r * n + i);
            for j in 0..p {
                dst[idx[i * p + j]] += src[j];
            }
        }
    }
    dx
}

impl<F: Real> BranchParams<F> {
    fn check_dims(&self, dims: &BranchDims) -> Result<()> {
        if self.patches() != dims.patches()
            || self.patch_len() != dims.patch_len
            || self.lookback() != dims.lookback
            || self.horizon() != dims.horizon
        {
            return Err(Error::Shape(format!(
                "branch parameters (N={}, P={}, L={}, T={}) do not match dims {dims:?}",
                self.patches(),
                self.patch_len(),
                self.lookback(),
                self.horizon()
            )));
        }
        Ok(())
    }

    /// Seasonal stream on `(R*N) x P` patches; returns `R x T`.
    pub fn seasonal_batch(&self, patches: &Array2<F>) -> (Array2<F>, SeasonalCache<F>) {
        let (n, p) = (self.patches(), self.patch_len());
        let rows = patches.nrows() / n;
        let patches_t = swap_inner(patches, rows, n, p);
        let pre_act = self.patch_linear.forward(patches_t.view());
        let act = pre_act.mapv(gelu);
        let linear_out = swap_inner(&act, rows, p, n);
        let (conv_out, conv_cols) = self.conv.forward(linear_out.view(), n);
        let mut merged = patches + &linear_out;
        merged += &conv_out;
        let merged = merged
            .into_shape_with_order((rows, n * p))
            .expect("contiguous");
        let hidden_pre = self.decoder_hidden.forward(merged.view());
        let hidden = hidden_pre.mapv(gelu);
        let out = self.decoder_out.forward(hidden.view());
        let cache = SeasonalCache {
            rows,
            patches_t,
            pre_act,
            conv_cols,
            merged,
            hidden_pre,
            hidden,
        };
        (out, cache)
    }

    /// Returns the gradient with respect to the `(R*N) x P` patches.
    fn seasonal_backward(&self, cache: &SeasonalCache<F>, dout: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let (n, p) = (self.patches(), self.patch_len());
        let rows = cache.rows;
        let mut dhidden = self
            .decoder_out
            .backward(cache.hidden.view(), dout, &mut grad.decoder_out);
        ndarray::Zip::from(&mut dhidden)
            .and(&cache.hidden_pre)
            .for_each(|g, &x| *g *= gelu_grad(x));
        let dmerged = self
            .decoder_hidden
            .backward(cache.merged.view(), &dhidden, &mut grad.decoder_hidden);
        let dmerged = dmerged.into_shape_with_order((rows * n, p)).expect("contiguous");
        let mut dlinear = self.conv.backward(&cache.conv_cols, &dmerged, n, &mut grad.conv);
        dlinear += &dmerged;
        let mut dact = swap_inner(&dlinear, rows, n, p);
        ndarray::Zip::from(&mut dact)
            .and(&cache.pre_act)
            .for_each(|g, &x| *g *= gelu_grad(x));
        let dpatches_t = self
            .patch_linear
            .backward(cache.patches_t.view(), &dact, &mut grad.patch_linear);
        let mut dpatches = swap_inner(&dpatches_t, rows, p, n);
        dpatches += &dmerged;
        dpatches
    }

    /// Trend stream on `R x L` rows; returns `R x T`.
    pub fn trend_batch(&self, trend: ArrayView2<F>) -> (Array2<F>, TrendCache<F>) {
        let q1 = self.trend_in.forward(trend);
        let (n1, c1) = self.trend_norm_in.forward(avgpool_rows(q1.view(), 2).view());
        let q2 = self.trend_mid.forward(n1.view());
        let (out, c2) = self.trend_norm_out.forward(avgpool_rows(q2.view(), 2).view());
        (
            out,
            TrendCache {
                norm_in_out: n1,
                norm_in: c1,
                norm_out: c2,
            },
        )
    }

    fn trend_backward(&self, input: ArrayView2<F>, cache: &TrendCache<F>, dout: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let dp2 = self
            .trend_norm_out
            .backward(&cache.norm_out, dout, &mut grad.trend_norm_out);
        let dq2 = avgpool_rows_backward(&dp2, 2);
        let dn1 = self
            .trend_mid
            .backward(cache.norm_in_out.view(), &dq2, &mut grad.trend_mid);
        let dp1 = self
            .trend_norm_in
            .backward(&cache.norm_in, &dn1, &mut grad.trend_norm_in);
        let dq1 = avgpool_rows_backward(&dp1, 2);
        self.trend_in.backward(input, &dq1, &mut grad.trend_in)
    }
}

/// Parameters of the DLinear alternate branch: one linear head per component.
#[derive(Clone, Debug, PartialEq)]
pub struct DLinearParams<F> {
    pub trend: Linear<F>,
    pub seasonal: Linear<F>,
}

impl<F: Real> DLinearParams<F> {
    pub fn init<R: Rng>(dims: &BranchDims, rng: &mut R) -> Self {
        Self {
            trend: Linear::init(dims.lookback, dims.horizon, rng),
            seasonal: Linear::init(dims.lookback, dims.horizon, rng),
        }
    }
}

impl<F: Real> ParamSet<F> for DLinearParams<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        self.trend.visit(&join(prefix, "trend"), f);
        self.seasonal.visit(&join(prefix, "seasonal"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        self.trend.visit_mut(f);
        self.seasonal.visit_mut(f);
    }
    fn zeros_like(&self) -> Self {
        Self {
            trend: self.trend.zeros_like(),
            seasonal: self.seasonal.zeros_like(),
        }
    }
}

/// Backbone flavour of a branch.
#[derive(Clone, Debug, PartialEq)]
pub enum Backbone<F> {
    Interpdn(BranchParams<F>),
    DLinear(DLinearParams<F>),
}

pub enum BackboneCache<F> {
    Interpdn(BranchCache<F>),
    DLinear,
}

impl<F: Real> ParamSet<F> for Backbone<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        match self {
            Backbone::Interpdn(p) => p.visit(prefix, f),
            Backbone::DLinear(p) => p.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        match self {
            Backbone::Interpdn(p) => p.visit_mut(f),
            Backbone::DLinear(p) => p.visit_mut(f),
        }
    }
    fn zeros_like(&self) -> Self {
        match self {
            Backbone::Interpdn(p) => Backbone::Interpdn(p.zeros_like()),
            Backbone::DLinear(p) => Backbone::DLinear(p.zeros_like()),
        }
    }
}

/// Concatenate `trend | seasonal` column blocks.
fn concat_features<F: Real>(trend: &Array2<F>, seasonal: &Array2<F>) -> Array2<F> {
    ndarray::concatenate(Axis(1), &[trend.view(), seasonal.view()]).expect("same row count")
}

impl<F: Real> Backbone<F> {
    /// Branch features `R x 2T` from decomposed rows.
    pub fn forward_batch(
        &self,
        seasonal: ArrayView2<F>,
        trend: ArrayView2<F>,
        dims: &BranchDims,
    ) -> (Array2<F>, BackboneCache<F>) {
        match self {
            Backbone::Interpdn(p) => {
                let patches = gather_patches(seasonal, dims);
                let (se, sc) = p.seasonal_batch(&patches);
                let (tr, tc) = p.trend_batch(trend);
                (
                    concat_features(&tr, &se),
                    BackboneCache::Interpdn(BranchCache {
                        seasonal: sc,
                        trend: tc,
                    }),
                )
            }
            Backbone::DLinear(p) => {
                let tr = p.trend.forward(trend);
                let se = p.seasonal.forward(seasonal);
                (concat_features(&tr, &se), BackboneCache::DLinear)
            }
        }
    }

    /// Returns gradients with respect to the `(seasonal, trend)` inputs.
    pub fn backward_batch(
        &self,
        seasonal: ArrayView2<F>,
        trend: ArrayView2<F>,
        cache: &BackboneCache<F>,
        dfeatures: &Array2<F>,
        dims: &BranchDims,
        grad: &mut Self,
    ) -> (Array2<F>, Array2<F>) {
        let t = dims.horizon;
        let dtr = dfeatures.slice(ndarray::s![.., ..t]).to_owned();
        let dse = dfeatures.slice(ndarray::s![.., t..]).to_owned();
        match (self, cache, grad) {
            (Backbone::Interpdn(p), BackboneCache::Interpdn(c), Backbone::Interpdn(g)) => {
                let dpatches = p.seasonal_backward(&c.seasonal, &dse, g);
                let ds = scatter_patches(&dpatches, seasonal.nrows(), dims);
                let dt = p.trend_backward(trend, &c.trend, &dtr, g);
                (ds, dt)
            }
            (Backbone::DLinear(p), BackboneCache::DLinear, Backbone::DLinear(g)) => {
                let dt = p.trend.backward(trend, &dtr, &mut g.trend);
                let ds = p.seasonal.backward(seasonal, &dse, &mut g.seasonal);
                (ds, dt)
            }
            _ => unreachable!("backbone, cache and gradient variants always agree"),
        }
    }
}

/// Features of one branch for one channel instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput<F> {
    /// `2T`: trend-stream output followed by seasonal-stream output.
    pub features: Array1<F>,
}

impl<F: Real> BranchOutput<F> {
    pub fn trend_part(&self) -> ndarray::ArrayView1<'_, F> {
        let t = self.features.len() / 2;
        self.features.slice(ndarray::s![..t])
    }

    pub fn seasonal_part(&self) -> ndarray::ArrayView1<'_, F> {
        let t = self.features.len() / 2;
        self.features.slice(ndarray::s![t..])
    }
}

/// Seasonal stream for a single `N x P` patch grid.
pub fn seasonal_forward<F: Real>(patches: &PatchGrid<F>, params: &BranchParams<F>) -> Result<Array1<F>> {
    if patches.data.nrows() != params.patches() || patches.data.ncols() != params.patch_len() {
        return Err(Error::Shape(format!(
            "patch grid {:?} does not match parameters ({} x {})",
            patches.data.shape(),
            params.patches(),
            params.patch_len()
        )));
    }
    let (out, _) = params.seasonal_batch(&patches.data);
    Ok(out.row(0).to_owned())
}

/// Trend stream for a single length-`L` trend component.
pub fn trend_forward<F: Real>(trend: &[F], params: &BranchParams<F>) -> Result<Array1<F>> {
    if trend.len() != params.lookback() {
        return Err(Error::Shape(format!(
            "trend of length {} but parameters expect {}",
            trend.len(),
            params.lookback()
        )));
    }
    let x = ArrayView2::from_shape((1, trend.len()), trend).expect("contiguous slice");
    let (out, _) = params.trend_batch(x);
    Ok(out.row(0).to_owned())
}

fn decomposed_row<F: Real>(lookback: &[F], ema_alpha: F) -> Result<(Array2<F>, Array2<F>)> {
    if lookback.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("lookback contains non-finite values".into()));
    }
    let d = ema_decompose(lookback, ema_alpha)?;
    let n = lookback.len();
    Ok((
        Array2::from_shape_vec((1, n), d.seasonal).expect("length n"),
        Array2::from_shape_vec((1, n), d.trend).expect("length n"),
    ))
}

/// Decompose, patch and run both streams for one channel instance.
pub fn branch_forward<F: Real>(
    lookback: &[F],
    params: &BranchParams<F>,
    dims: &BranchDims,
    ema_alpha: F,
) -> Result<BranchOutput<F>> {
    params.check_dims(dims)?;
    if lookback.len() != dims.lookback {
        return Err(Error::Shape(format!(
            "lookback of length {} but dims expect {}",
            lookback.len(),
            dims.lookback
        )));
    }
    let (se, tr) = decomposed_row(lookback, ema_alpha)?;
    let (out, _) = Backbone::Interpdn(params.clone()).forward_batch(se.view(), tr.view(), dims);
    Ok(BranchOutput {
        features: out.row(0).to_owned(),
    })
}

/// DLinear-style branch: one linear map per decomposed component.
pub fn dlinear_branch_forward<F: Real>(
    lookback: &[F],
    params: &DLinearParams<F>,
    ema_alpha: F,
) -> Result<BranchOutput<F>> {
    if lookback.len() != params.trend.input_dim() || lookback.len() != params.seasonal.input_dim() {
        return Err(Error::Shape(format!(
            "lookback of length {} but DLinear expects {}",
            lookback.len(),
            params.trend.input_dim()
        )));
    }
    let (se, tr) = decomposed_row(lookback, ema_alpha)?;
    let t = params.trend.forward(tr.view());
    let s = params.seasonal.forward(se.view());
    Ok(BranchOutput {
        features: concat_features(&t, &s).row(0).to_owned(),
    })
}
