//! The multi-branch forecaster: parameters, batched forward pass, losses and
//! reverse-mode gradients.
//!
//! A batch is an `R x L` matrix whose row `r` is channel `r % C` of window
//! `r / C`. Every branch sees the same instance-normalized, decomposed rows.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneCache, BranchDims, BranchParams, DLinearParams};
use crate::config::{AblationMode, BackboneKind, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{
    combine, pool_fine, squared_sum, theta_decay, weighted_abs_grad, weighted_abs_sum, DecaySchedule,
    LossTerms, LossWeights,
};
use crate::nn::{softmax_rows, softmax_rows_backward, Linear};
use crate::params::{join, visit_array, visit_array_mut, ParamSet, TensorRef};
use crate::probhead::{
    build_interleaved_set, merge_distributions, support_column, FusionResult, MergedDistribution,
    StepDistribution, SupportSet,
};
use crate::real::Real;
use crate::transform::{
    avgpool_rows_backward, ema_trend_rows, ema_trend_rows_backward, pad_rows_backward, row_moments,
    RevinAffine, RevinStats, REVIN_EPS,
};

/// Output head of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Distribution over the first (0) or interleaved (1) support set.
    Distribution(usize),
    Scalar,
}

/// How a stage combines its branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Single,
    Confidence,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLayout {
    pub heads: Vec<HeadKind>,
    pub steps: usize,
}

impl StageLayout {
    pub fn aggregation(&self) -> Aggregation {
        match self.heads.as_slice() {
            [_] => Aggregation::Single,
            [HeadKind::Distribution(_), HeadKind::Distribution(_)] => Aggregation::Confidence,
            _ => Aggregation::Mean,
        }
    }
}

/// Everything about the model that is fixed by the configuration.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub dims: BranchDims,
    pub channels: usize,
    pub mode: AblationMode,
    pub backbone: BackboneKind,
    pub downsample: usize,
    pub supports: [SupportSet; 2],
    pub ema_alpha: f64,
    pub weights: LossWeights,
    pub theta: DecaySchedule,
    pub merge_softmax: bool,
    pub fine: StageLayout,
    pub coarse: Option<StageLayout>,
}

impl ModelSpec {
    pub fn from_config(cfg: &TrainConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 {
            return Err(Error::InvalidArgument("model needs at least one channel".into()));
        }
        let m = &cfg.model;
        let dims = BranchDims::new(m.lookback, m.horizon, m.patch_len, m.stride)?;
        let s = &cfg.support;
        let sp1 = SupportSet::build(s.flavor, s.count, s.boundary)?;
        let sp2 = build_interleaved_set(&sp1, s.appended_boundary)?;
        let t = m.horizon;
        let coarse_steps = t.div_ceil(m.downsample);
        use HeadKind::*;
        let (fine, coarse) = match m.mode {
            AblationMode::Full => (vec![Distribution(0), Distribution(1)], Some(vec![Distribution(0), Distribution(1)])),
            AblationMode::Sbsp => (vec![Scalar], None),
            AblationMode::Sbpdp => (vec![Distribution(0)], None),
            AblationMode::Ibbpdp => (vec![Distribution(0), Distribution(1)], None),
            AblationMode::Bspdp => (vec![Distribution(0)], Some(vec![Distribution(0)])),
            AblationMode::Fourbsp => (vec![Scalar; 4], None),
        };
        Ok(Self {
            dims,
            channels,
            mode: m.mode,
            backbone: m.backbone,
            downsample: m.downsample,
            supports: [sp1, sp2],
            ema_alpha: m.ema_alpha,
            weights: cfg.effective_weights(),
            theta: theta_decay(t, cfg.loss.theta_shape)?,
            merge_softmax: s.merge_softmax,
            fine: StageLayout { heads: fine, steps: t },
            coarse: coarse.map(|heads| StageLayout { heads, steps: coarse_steps }),
        })
    }

    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    pub fn lookback(&self) -> usize {
        self.dims.lookback
    }

    pub fn support_len(&self) -> usize {
        self.supports[0].len()
    }

    fn head_width(&self, head: HeadKind, steps: usize) -> usize {
        match head {
            HeadKind::Distribution(_) => steps * self.support_len(),
            HeadKind::Scalar => steps,
        }
    }

    /// True when this mode produces distributions on the fine scale.
    pub fn is_probabilistic(&self) -> bool {
        self.fine.heads.iter().all(|h| matches!(h, HeadKind::Distribution(_)))
    }
}

/// One backbone plus its projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchUnit<F> {
    pub backbone: Backbone<F>,
    pub head: Linear<F>,
}

impl<F: Real> ParamSet<F> for BranchUnit<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
    }
    fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

impl<F: Real> ParamSet<F> for RevinAffine<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        visit_array(prefix, "scale", &self.scale, f);
        visit_array(prefix, "shift", &self.shift, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        visit_array_mut(&mut self.scale, f);
        visit_array_mut(&mut self.shift, f);
    }
    fn zeros_like(&self) -> Self {
        Self {
            scale: Array1::zeros(self.scale.len()),
            shift: Array1::zeros(self.shift.len()),
        }
    }
}

/// All learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub revin: RevinAffine<F>,
    pub fine: Vec<BranchUnit<F>>,
    pub coarse: Vec<BranchUnit<F>>,
}

impl<F: Real> ParamSet<F> for ModelParams<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        self.revin.visit(&join(prefix, "revin"), f);
        for (i, u) in self.fine.iter().enumerate() {
            u.visit(&join(prefix, &format!("fine.{i}")), f);
        }
        for (i, u) in self.coarse.iter().enumerate() {
            u.visit(&join(prefix, &format!("coarse.{i}")), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        self.revin.visit_mut(f);
        for u in &mut self.fine {
            u.visit_mut(f);
        }
        for u in &mut self.coarse {
            u.visit_mut(f);
        }
    }
    fn zeros_like(&self) -> Self {
        Self {
            revin: self.revin.zeros_like(),
            fine: self.fine.iter().map(|u| u.zeros_like()).collect(),
            coarse: self.coarse.iter().map(|u| u.zeros_like()).collect(),
        }
    }
}

impl<F: Real> ModelParams<F> {
    /// Name and shape of every tensor in visit order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |t| out.push((t.name, t.shape.to_vec())));
        out
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let flat: Vec<G> = self.flatten().iter().map(|v| G::lit(v.as_f64())).collect();
        let mut out = ModelParams::<G>::zeros_for(self);
        out.assign_flat(&flat);
        out
    }

    fn zeros_for<H: Real>(other: &ModelParams<H>) -> Self {
        let unit = |u: &BranchUnit<H>| BranchUnit {
            backbone: match &u.backbone {
                Backbone::Interpdn(p) => Backbone::Interpdn(BranchParams {
                    patch_linear: Linear::zeros(p.patch_linear.input_dim(), p.patch_linear.output_dim()),
                    conv: crate::nn::PatchConv::zeros(p.conv.bias.len()),
                    decoder_hidden: Linear::zeros(p.decoder_hidden.input_dim(), p.decoder_hidden.output_dim()),
                    decoder_out: Linear::zeros(p.decoder_out.input_dim(), p.decoder_out.output_dim()),
                    trend_in: Linear::zeros(p.trend_in.input_dim(), p.trend_in.output_dim()),
                    trend_norm_in: crate::nn::LayerNorm::zeros(p.trend_norm_in.gamma.len()),
                    trend_mid: Linear::zeros(p.trend_mid.input_dim(), p.trend_mid.output_dim()),
                    trend_norm_out: crate::nn::LayerNorm::zeros(p.trend_norm_out.gamma.len()),
                }),
                Backbone::DLinear(p) => Backbone::DLinear(DLinearParams {
                    trend: Linear::zeros(p.trend.input_dim(), p.trend.output_dim()),
                    seasonal: Linear::zeros(p.seasonal.input_dim(), p.seasonal.output_dim()),
                }),
            },
            head: Linear::zeros(u.head.input_dim(), u.head.output_dim()),
        };
        ModelParams {
            revin: RevinAffine {
                scale: Array1::zeros(other.revin.scale.len()),
                shift: Array1::zeros(other.revin.shift.len()),
            },
            fine: other.fine.iter().map(unit).collect(),
            coarse: other.coarse.iter().map(unit).collect(),
        }
    }

    /// Fail unless every tensor has the shape `spec` implies.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let expect = init_params::<F>(spec, 0).manifest();
        let got = self.manifest();
        if expect != got {
            let diff = expect
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} tensors vs {}", expect.len(), got.len()));
            return Err(Error::Shape(format!("parameters do not match the configuration: {diff}")));
        }
        Ok(())
    }
}

fn init_unit<F: Real>(spec: &ModelSpec, head: HeadKind, steps: usize, rng: &mut ChaCha8Rng) -> BranchUnit<F> {
    let backbone = match spec.backbone {
        BackboneKind::Interpdn => Backbone::Interpdn(BranchParams::init(&spec.dims, rng)),
        BackboneKind::Dlinear => Backbone::DLinear(DLinearParams::init(&spec.dims, rng)),
    };
    let head = Linear::init(spec.dims.features(), spec.head_width(head, steps), rng);
    BranchUnit { backbone, head }
}

/// Deterministic initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params<F: Real>(spec: &ModelSpec, seed: u64) -> ModelParams<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = spec
        .fine
        .heads
        .iter()
        .map(|&h| init_unit(spec, h, spec.fine.steps, &mut rng))
        .collect();
    let coarse = spec
        .coarse
        .iter()
        .flat_map(|st| st.heads.iter().map(move |&h| (h, st.steps)))
        .map(|(h, steps)| init_unit(spec, h, steps, &mut rng))
        .collect();
    ModelParams {
        revin: RevinAffine::identity(spec.channels),
        fine,
        coarse,
    }
}

/// Output of one branch on a batch.
pub struct UnitOut<F> {
    /// `R x steps` expectation (or scalar output), normalized scale.
    pub expectation: Array2<F>,
    /// `(R*steps) x S` for distribution heads.
    pub probs: Option<Array2<F>>,
    /// `R x steps` max probability.
    pub confidence: Option<Array2<F>>,
    argmax: Vec<usize>,
    features: Array2<F>,
    cache: BackboneCache<F>,
}

pub struct StageOut<F> {
    pub units: Vec<UnitOut<F>>,
    /// `R x steps`, normalized scale.
    pub fused: Array2<F>,
    /// Fusion weights of the first branch when two distributions are fused.
    pub weights: Option<Array2<F>>,
}

/// Forward state kept for losses and gradients.
pub struct ForwardPass<F> {
    /// `R x T` denormalized prediction.
    pub prediction: Array2<F>,
    pub fine: StageOut<F>,
    pub coarse: Option<StageOut<F>>,
    pub mean: Array1<F>,
    /// `std + eps` per row.
    pub denom: Array1<F>,
    /// `(x - mean) / denom`
    standardized: Array2<F>,
    seasonal: Array2<F>,
    trend: Array2<F>,
}

fn channel_of(r: usize, channels: usize) -> usize {
    r % channels
}

fn unit_forward<F: Real>(
    unit: &BranchUnit<F>,
    head: HeadKind,
    steps: usize,
    spec: &ModelSpec,
    seasonal: ArrayView2<F>,
    trend: ArrayView2<F>,
    support_cols: &[Array1<F>; 2],
) -> UnitOut<F> {
    let (features, cache) = unit.backbone.forward_batch(seasonal, trend, &spec.dims);
    let out = unit.head.forward(features.view());
    let rows = out.nrows();
    match head {
        HeadKind::Scalar => UnitOut {
            expectation: out,
            probs: None,
            confidence: None,
            argmax: Vec::new(),
            features,
            cache,
        },
        HeadKind::Distribution(which) => {
            let s = spec.support_len();
            let logits = out.into_shape_with_order((rows * steps, s)).expect("contiguous");
            let probs = softmax_rows(logits.view());
            let exp = probs.dot(&support_cols[which]);
            let mut argmax = Vec::with_capacity(rows * steps);
            let mut conf = Vec::with_capacity(rows * steps);
            for row in probs.rows() {
                let (j, &v) = row
                    .iter()
                    .enumerate()
                    .fold((0, &row[0]), |best, (j, v)| if *v > *best.1 { (j, v) } else { best });
                argmax.push(j);
                conf.push(v);
            }
            UnitOut {
                expectation: exp.into_shape_with_order((rows, steps)).expect("contiguous"),
                probs: Some(probs),
                confidence: Some(Array2::from_shape_vec((rows, steps), conf).expect("sized")),
                argmax,
                features,
                cache,
            }
        }
    }
}

fn stage_forward<F: Real>(
    units: &[BranchUnit<F>],
    layout: &StageLayout,
    spec: &ModelSpec,
    seasonal: ArrayView2<F>,
    trend: ArrayView2<F>,
    support_cols: &[Array1<F>; 2],
) -> StageOut<F> {
    let outs: Vec<UnitOut<F>> = units
        .iter()
        .zip(&layout.heads)
        .map(|(u, &h)| unit_forward(u, h, layout.steps, spec, seasonal, trend, support_cols))
        .collect();
    match layout.aggregation() {
        Aggregation::Single => StageOut {
            fused: outs[0].expectation.clone(),
            units: outs,
            weights: None,
        },
        Aggregation::Mean => {
            let n = F::lit(outs.len() as f64);
            let mut fused = outs[0].expectation.clone();
            for o in &outs[1..] {
                fused += &o.expectation;
            }
            fused.mapv_inplace(|v| v / n);
            StageOut {
                fused,
                units: outs,
                weights: None,
            }
        }
        Aggregation::Confidence => {
            let (e1, e2) = (
                outs[0].confidence.as_ref().expect("distribution head"),
                outs[1].confidence.as_ref().expect("distribution head"),
            );
            let w = Zip::from(e1).and(e2).map_collect(|&a, &b| a / (a + b));
            let fused = Zip::from(&w)
                .and(&outs[0].expectation)
                .and(&outs[1].expectation)
                .map_collect(|&w, &x1, &x2| w * x1 + (F::one() - w) * x2);
            StageOut {
                fused,
                units: outs,
                weights: Some(w),
            }
        }
    }
}

/// Forward a batch of `R x L` rows. Coarse branches run only when `with_coarse`.
pub fn forward_batch<F: Real>(
    params: &ModelParams<F>,
    spec: &ModelSpec,
    input: ArrayView2<F>,
    with_coarse: bool,
) -> Result<ForwardPass<F>> {
    let (rows, l) = input.dim();
    if l != spec.lookback() || rows % spec.channels != 0 {
        return Err(Error::Shape(format!(
            "batch is {rows}x{l}; expected a multiple of {} rows of length {}",
            spec.channels,
            spec.lookback()
        )));
    }
    let c = spec.channels;
    let eps = F::lit(REVIN_EPS);
    let (mean, std) = row_moments(input);
    let denom = std.mapv(|s| s + eps);
    let mut standardized = input.to_owned();
    let mut normalized = Array2::zeros((rows, l));
    for r in 0..rows {
        let ch = channel_of(r, c);
        let (m, d) = (mean[r], denom[r]);
        let (a, b) = (params.revin.scale[ch], params.revin.shift[ch]);
        let mut z = standardized.row_mut(r);
        let mut out = normalized.row_mut(r);
        for j in 0..l {
            z[j] = (z[j] - m) / d;
            out[j] = a * z[j] + b;
        }
    }
    let alpha = F::lit(spec.ema_alpha);
    let trend = ema_trend_rows(normalized.view(), alpha);
    let seasonal = &normalized - &trend;
    let cols = [support_column(&spec.supports[0]), support_column(&spec.supports[1])];
    let fine = stage_forward(&params.fine, &spec.fine, spec, seasonal.view(), trend.view(), &cols);
    let coarse = match (&spec.coarse, with_coarse) {
        (Some(layout), true) => Some(stage_forward(
            &params.coarse,
            layout,
            spec,
            seasonal.view(),
            trend.view(),
            &cols,
        )),
        _ => None,
    };
    let mut prediction = fine.fused.clone();
    for (r, mut row) in prediction.rows_mut().into_iter().enumerate() {
        let ch = channel_of(r, c);
        let (a, b) = (params.revin.scale[ch], params.revin.shift[ch]);
        let (m, d) = (mean[r], denom[r]);
        row.mapv_inplace(|v| (v - b) / a * d + m);
    }
    Ok(ForwardPass {
        prediction,
        fine,
        coarse,
        mean,
        denom,
        standardized,
        seasonal,
        trend,
    })
}

fn check_target<F>(spec: &ModelSpec, pass: &ForwardPass<F>, target: &ArrayView2<F>) -> Result<()> {
    if target.dim() != pass.prediction.dim() {
        return Err(Error::Shape(format!(
            "target is {:?}, prediction is {:?}",
            target.dim(),
            pass.prediction.dim()
        )));
    }
    if spec.coarse.is_some() && pass.coarse.is_none() && (spec.weights.beta > 0.0 || spec.weights.gamma > 0.0) {
        return Err(Error::InvalidArgument("loss needs the coarse branches; run the forward pass with them".into()));
    }
    Ok(())
}

/// Loss terms summed over the windows of a batch (divide by the window count for the mean).
pub fn loss_sums<F: Real>(spec: &ModelSpec, pass: &ForwardPass<F>, target: ArrayView2<F>) -> Result<LossTerms> {
    check_target(spec, pass, &target)?;
    let tc = (spec.horizon() * spec.channels) as f64;
    let k = spec.downsample as f64;
    let theta = spec.theta.cast::<F>();
    let mut terms = LossTerms {
        l_p: weighted_abs_sum(target, pass.prediction.view(), &theta) / tc,
        ..LossTerms::default()
    };
    if spec.fine.aggregation() == Aggregation::Confidence {
        let u = &pass.fine.units;
        terms.l_f = squared_sum(u[0].expectation.view(), u[1].expectation.view()) / tc;
    }
    if let Some(coarse) = &pass.coarse {
        if coarse.units.len() == 2 {
            terms.l_c = k * squared_sum(coarse.units[0].expectation.view(), coarse.units[1].expectation.view()) / tc;
        }
        let pooled = pool_fine(pass.fine.fused.view(), spec.downsample);
        terms.l_t = k * squared_sum(coarse.fused.view(), pooled.view()) / tc;
    }
    Ok(terms)
}

/// Weighted total of mean losses.
pub fn total_of(spec: &ModelSpec, mean_terms: &LossTerms) -> f64 {
    combine(mean_terms, &spec.weights)
}

fn unit_backward<F: Real>(
    unit: &BranchUnit<F>,
    out: &UnitOut<F>,
    head: HeadKind,
    spec: &ModelSpec,
    dexp: &Array2<F>,
    dconf: Option<&Array2<F>>,
    pass: &ForwardPass<F>,
    support_cols: &[Array1<F>; 2],
    grad: &mut BranchUnit<F>,
    dseasonal: &mut Array2<F>,
    dtrend: &mut Array2<F>,
) {
    let dhead = match head {
        HeadKind::Scalar => dexp.clone(),
        HeadKind::Distribution(which) => {
            let probs = out.probs.as_ref().expect("distribution head");
            let sp = &support_cols[which];
            let s = sp.len();
            let dexp_flat = dexp.as_slice().expect("contiguous");
            let mut dprobs = Array2::zeros(probs.raw_dim());
            for (i, mut row) in dprobs.rows_mut().into_iter().enumerate() {
                let g = dexp_flat[i];
                for j in 0..s {
                    row[j] = g * sp[j];
                }
            }
            if let Some(dc) = dconf {
                let dc = dc.as_slice().expect("contiguous");
                for (i, &j) in out.argmax.iter().enumerate() {
                    dprobs[[i, j]] += dc[i];
                }
            }
            let dlogits = softmax_rows_backward(probs, &dprobs);
            let rows = out.features.nrows();
            dlogits.into_shape_with_order((rows, dexp.ncols() * s)).expect("contiguous")
        }
    };
    let dfeatures = unit.head.backward(out.features.view(), &dhead, &mut grad.head);
    let (ds, dt) = unit.backbone.backward_batch(
        pass.seasonal.view(),
        pass.trend.view(),
        &out.cache,
        &dfeatures,
        &spec.dims,
        &mut grad.backbone,
    );
    *dseasonal += &ds;
    *dtrend += &dt;
}

/// Backward through one stage given the gradient of its fused output and
/// the scaled weight of its intra-stage consistency term.
#[allow(clippy::too_many_arguments)]
fn stage_backward<F: Real>(
    units: &[BranchUnit<F>],
    layout: &StageLayout,
    stage: &StageOut<F>,
    dfused: &Array2<F>,
    consistency: F,
    spec: &ModelSpec,
    pass: &ForwardPass<F>,
    support_cols: &[Array1<F>; 2],
    grads: &mut [BranchUnit<F>],
    dseasonal: &mut Array2<F>,
    dtrend: &mut Array2<F>,
) {
    let n = units.len();
    let mut dexp: Vec<Array2<F>> = Vec::with_capacity(n);
    let mut dconf: Vec<Option<Array2<F>>> = vec![None; n];
    match layout.aggregation() {
        Aggregation::Single => dexp.push(dfused.clone()),
        Aggregation::Mean => {
            let inv = F::one() / F::lit(n as f64);
            for _ in 0..n {
                dexp.push(dfused.mapv(|g| g * inv));
            }
        }
        Aggregation::Confidence => {
            let w = stage.weights.as_ref().expect("fusion weights");
            let (x1, x2) = (&stage.units[0].expectation, &stage.units[1].expectation);
            let (e1, e2) = (
                stage.units[0].confidence.as_ref().expect("distribution head"),
                stage.units[1].confidence.as_ref().expect("distribution head"),
            );
            let two = F::lit(2.0);
            let mut d1 = Array2::zeros(w.raw_dim());
            let mut d2 = Array2::zeros(w.raw_dim());
            let mut de1 = Array2::zeros(w.raw_dim());
            let mut de2 = Array2::zeros(w.raw_dim());
            Zip::from(&mut d1)
                .and(&mut d2)
                .and(&mut de1)
                .and(&mut de2)
                .and(dfused)
                .and(w)
                .for_each(|a, b, c, d, &g, &w| {
                    *a = w * g;
                    *b = (F::one() - w) * g;
                    *c = g;
                    *d = g;
                });
            Zip::from(&mut d1)
                .and(&mut d2)
                .and(&mut de1)
                .and(&mut de2)
                .and(x1)
                .and(x2)
                .for_each(|a, b, c, d, &x1, &x2| {
                    let diff = x1 - x2;
                    let cons = two * consistency * diff;
                    *a += cons;
                    *b -= cons;
                    // dL/dw
                    *c *= diff;
                    *d *= diff;
                });
            Zip::from(&mut de1)
                .and(&mut de2)
                .and(e1)
                .and(e2)
                .for_each(|c, d, &e1, &e2| {
                    let s = e1 + e2;
                    let s2 = s * s;
                    *c = *c * e2 / s2;
                    *d = -*d * e1 / s2;
                });
            dexp.push(d1);
            dexp.push(d2);
            dconf[0] = Some(de1);
            dconf[1] = Some(de2);
        }
    }
    for (i, ((unit, grad), &head)) in units.iter().zip(grads.iter_mut()).zip(&layout.heads).enumerate() {
        unit_backward(
            unit,
            &stage.units[i],
            head,
            spec,
            &dexp[i],
            dconf[i].as_ref(),
            pass,
            support_cols,
            grad,
            dseasonal,
            dtrend,
        );
    }
}

/// Accumulate `scale * d(total)/d(params)` into `grad`, where total is the
/// weighted sum of the per-window losses of this batch.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    spec: &ModelSpec,
    pass: &ForwardPass<F>,
    target: ArrayView2<F>,
    scale: F,
    grad: &mut ModelParams<F>,
) -> Result<()> {
    check_target(spec, pass, &target)?;
    let (rows, t) = pass.prediction.dim();
    let c = spec.channels;
    let tc = F::lit((t * c) as f64);
    let k = F::lit(spec.downsample as f64);
    let w = &spec.weights;
    let theta = spec.theta.cast::<F>();
    let cols = [support_column(&spec.supports[0]), support_column(&spec.supports[1])];

    // prediction loss through the denormalization
    let dpred = weighted_abs_grad(target, pass.prediction.view(), &theta, scale / tc);
    let mut dfine = Array2::zeros((rows, t));
    for r in 0..rows {
        let ch = channel_of(r, c);
        let (a, b) = (params.revin.scale[ch], params.revin.shift[ch]);
        let d = pass.denom[r];
        let mut da = F::zero();
        let mut db = F::zero();
        for j in 0..t {
            let g = dpred[[r, j]];
            let yn = pass.fine.fused[[r, j]];
            dfine[[r, j]] = g * d / a;
            da -= g * (yn - b) / (a * a) * d;
            db -= g * d / a;
        }
        grad.revin.scale[ch] += da;
        grad.revin.shift[ch] += db;
    }

    let mut dseasonal = Array2::zeros(pass.seasonal.raw_dim());
    let mut dtrend = Array2::zeros(pass.trend.raw_dim());

    let coarse_active = w.beta != 0.0 || w.gamma != 0.0;
    if let (Some(layout), Some(stage), true) = (&spec.coarse, &pass.coarse, coarse_active) {
        let g_t = F::lit(w.gamma) * scale * k / tc;
        let pooled = pool_fine(pass.fine.fused.view(), spec.downsample);
        let diff = &stage.fused - &pooled;
        let dcoarse = diff.mapv(|v| F::lit(2.0) * g_t * v);
        let dpooled = dcoarse.mapv(|v| -v);
        let up = avgpool_rows_backward(&dpooled, spec.downsample);
        let up = if up.ncols() == t { up } else { pad_rows_backward(&up, t) };
        dfine += &up;
        let cons = F::lit(w.beta) * scale * k / tc;
        stage_backward(
            &params.coarse,
            layout,
            stage,
            &dcoarse,
            cons,
            spec,
            pass,
            &cols,
            &mut grad.coarse,
            &mut dseasonal,
            &mut dtrend,
        );
    }

    let cons = F::lit(w.alpha) * scale / tc;
    stage_backward(
        &params.fine,
        &spec.fine,
        &pass.fine,
        &dfine,
        cons,
        spec,
        pass,
        &cols,
        &mut grad.fine,
        &mut dseasonal,
        &mut dtrend,
    );

    // seasonal = xn - ema(xn), trend = ema(xn)
    let mut dnorm = dseasonal.clone();
    let dt = &dtrend - &dseasonal;
    dnorm += &ema_trend_rows_backward(&dt, F::lit(spec.ema_alpha));
    for (r, (g, z)) in dnorm.rows().into_iter().zip(pass.standardized.rows()).enumerate() {
        let ch = channel_of(r, c);
        let mut da = F::zero();
        let mut db = F::zero();
        for (&g, &z) in g.iter().zip(z.iter()) {
            da += g * z;
            db += g;
        }
        grad.revin.scale[ch] += da;
        grad.revin.shift[ch] += db;
    }
    Ok(())
}

/// Stack windows (`L x C` each) into `R x L` rows.
pub fn windows_to_rows<F: Real>(windows: &[ArrayView2<F>]) -> Array2<F> {
    let (l, c) = windows[0].dim();
    let mut out = Array2::zeros((windows.len() * c, l));
    for (b, w) in windows.iter().enumerate() {
        for ch in 0..c {
            out.row_mut(b * c + ch).assign(&w.column(ch));
        }
    }
    out
}

/// Unstack `R x T` rows into `T x C` for window `b`.
pub fn rows_to_window<F: Real>(rows: ArrayView2<F>, b: usize, channels: usize) -> Array2<F> {
    let t = rows.ncols();
    let mut out = Array2::zeros((t, channels));
    for ch in 0..channels {
        out.column_mut(ch).assign(&rows.row(b * channels + ch));
    }
    out
}

/// Undo instance normalization on `R x steps` rows.
pub fn denormalize_rows<F: Real>(
    params: &ModelParams<F>,
    pass: &ForwardPass<F>,
    rows: &Array2<F>,
    channels: usize,
) -> Array2<F> {
    let mut out = rows.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let ch = channel_of(r, channels);
        let (a, b) = (params.revin.scale[ch], params.revin.shift[ch]);
        let (m, d) = (pass.mean[r], pass.denom[r]);
        row.mapv_inplace(|v| (v - b) / a * d + m);
    }
    out
}

fn step_distribution<F: Real>(unit: &UnitOut<F>, r: usize, steps: usize) -> Option<StepDistribution> {
    let probs = unit.probs.as_ref()?;
    let block = probs.slice(ndarray::s![r * steps..(r + 1) * steps, ..]);
    Some(StepDistribution {
        probs: block.mapv(|v| v.as_f64()),
    })
}

/// Fine-scale merged distribution of row `r` on the normalized scale.
pub fn merged_distribution<F: Real>(spec: &ModelSpec, pass: &ForwardPass<F>, r: usize) -> Option<MergedDistribution> {
    let steps = spec.fine.steps;
    let stage = &pass.fine;
    match spec.fine.aggregation() {
        Aggregation::Confidence => {
            let d1 = step_distribution(&stage.units[0], r, steps)?;
            let d2 = step_distribution(&stage.units[1], r, steps)?;
            let w: Vec<f64> = stage.weights.as_ref()?.row(r).iter().map(|v| v.as_f64()).collect();
            let [i1, i2] = match spec.fine.heads[..] {
                [HeadKind::Distribution(a), HeadKind::Distribution(b)] => [a, b],
                _ => return None,
            };
            merge_distributions(&d1, &d2, &w, &spec.supports[i1], &spec.supports[i2], spec.merge_softmax).ok()
        }
        Aggregation::Single => match spec.fine.heads[0] {
            HeadKind::Distribution(i) => {
                let d = step_distribution(&stage.units[0], r, steps)?;
                Some(MergedDistribution::from_single(&d, &spec.supports[i]))
            }
            HeadKind::Scalar => None,
        },
        Aggregation::Mean => None,
    }
}

fn stage_fusion<F: Real>(stage: &StageOut<F>, r: usize) -> Option<FusionResult> {
    let w = stage.weights.as_ref()?;
    let v = |a: &Array2<F>| a.row(r).iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    Some(FusionResult {
        fused: v(&stage.fused),
        weights: v(w),
        expectation_1: v(&stage.units[0].expectation),
        expectation_2: v(&stage.units[1].expectation),
        confidence_1: v(stage.units[0].confidence.as_ref()?),
        confidence_2: v(stage.units[1].confidence.as_ref()?),
    })
}

/// Result of running the model on one window.
#[derive(Clone, Debug)]
pub struct FullOutput {
    /// `T x C`
    pub prediction: Array2<f64>,
    /// Per channel; absent unless two fine distributions are fused.
    pub fine: Option<Vec<FusionResult>>,
    pub coarse: Option<Vec<FusionResult>>,
    pub stats: RevinStats<f64>,
}

/// Run one `L x C` window through every branch.
pub fn forward_full<F: Real>(params: &ModelParams<F>, spec: &ModelSpec, window: ArrayView2<F>) -> Result<FullOutput> {
    if window.ncols() != spec.channels {
        return Err(Error::Shape(format!(
            "window has {} channels, model has {}",
            window.ncols(),
            spec.channels
        )));
    }
    let rows = windows_to_rows(&[window]);
    let pass = forward_batch(params, spec, rows.view(), true)?;
    let c = spec.channels;
    let per_channel = |stage: &StageOut<F>| -> Option<Vec<FusionResult>> { (0..c).map(|r| stage_fusion(stage, r)).collect() };
    Ok(FullOutput {
        prediction: rows_to_window(pass.prediction.view(), 0, c).mapv(|v| v.as_f64()),
        fine: per_channel(&pass.fine),
        coarse: pass.coarse.as_ref().and_then(per_channel),
        stats: RevinStats {
            mean: pass.mean.mapv(|v| v.as_f64()),
            std: pass.denom.mapv(|v| v.as_f64() - REVIN_EPS),
            eps: REVIN_EPS,
        },
    })
}

/// Mean losses and `d(total)/d(params)` over a whole batch in one pass.
pub fn loss_and_grad<F: Real>(
    params: &ModelParams<F>,
    spec: &ModelSpec,
    input: ArrayView2<F>,
    target: ArrayView2<F>,
) -> Result<(LossTerms, f64, ModelParams<F>)> {
    let windows = input.nrows() / spec.channels;
    let pass = forward_batch(params, spec, input, true)?;
    let terms = loss_sums(spec, &pass, target)?.scaled(1.0 / windows as f64);
    let mut grad = params.zeros_like();
    backward(params, spec, &pass, target, F::one() / F::lit(windows as f64), &mut grad)?;
    Ok((terms, total_of(spec, &terms), grad))
}

/// Mean weighted total over a batch without gradients.
pub fn total_loss_of<F: Real>(params: &ModelParams<F>, spec: &ModelSpec, input: ArrayView2<F>, target: ArrayView2<F>) -> Result<f64> {
    let windows = input.nrows() / spec.channels;
    let pass = forward_batch(params, spec, input, true)?;
    let terms = loss_sums(spec, &pass, target)?.scaled(1.0 / windows as f64);
    Ok(total_of(spec, &terms))
}
