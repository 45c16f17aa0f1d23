//! Data preparation, mini-batch training with early stopping, and evaluation.
//!
//! Gradients of a batch are computed over fixed chunks of windows and summed
//! in chunk order, so results do not depend on the number of worker threads.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataio::{apply_scaler, fit_scaler, split_segment, window_starts, MultivariateSeries, Scaler, SplitKind};
use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::metrics::{quantile_from_distribution, MetricAccumulator, MetricReport, QUANTILE_LEVELS};
use crate::model::{backward, forward_batch, init_params, loss_sums, merged_distribution, total_of, ForwardPass, ModelParams, ModelSpec};
use crate::optim::{learning_rate, Adam};
use crate::params::ParamSet;
use crate::real::Real;

/// Windows per gradient chunk.
pub const CHUNK_WINDOWS: usize = 128;

/// Worker threads from `INTERPDN_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("INTERPDN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Standardized rows of one split and the start row of each of its windows.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub kind: SplitKind,
    /// Rows `first_row..` of the standardized series.
    pub values: Array2<f64>,
    pub first_row: usize,
    pub starts: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

impl SplitData {
    pub fn windows(&self) -> usize {
        self.starts.len()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// `L x C`
    pub fn lookback_window(&self, i: usize) -> ArrayView2<'_, f64> {
        let s0 = self.starts[i];
        self.values.slice(s![s0..s0 + self.lookback, ..])
    }

    /// `T x C`
    pub fn target_window(&self, i: usize) -> ArrayView2<'_, f64> {
        let s0 = self.starts[i] + self.lookback;
        self.values.slice(s![s0..s0 + self.horizon, ..])
    }

    /// Batch rows (`R x L` inputs, `R x T` targets) of the given windows.
    pub fn rows<F: Real>(&self, windows: &[usize]) -> (Array2<F>, Array2<F>) {
        let c = self.channels();
        let (l, t) = (self.lookback, self.horizon);
        let mut input = Array2::zeros((windows.len() * c, l));
        let mut target = Array2::zeros((windows.len() * c, t));
        for (b, &w) in windows.iter().enumerate() {
            let s0 = self.starts[w];
            for ch in 0..c {
                let r = b * c + ch;
                for j in 0..l {
                    input[[r, j]] = F::lit(self.values[[s0 + j, ch]]);
                }
                for j in 0..t {
                    target[[r, j]] = F::lit(self.values[[s0 + l + j, ch]]);
                }
            }
        }
        (input, target)
    }
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub scaler: Scaler,
    pub channel_names: Vec<String>,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl PreparedData {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn split(&self, kind: SplitKind) -> &SplitData {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

/// Split, standardize with train statistics, and index the windows of every split.
pub fn prepare_data(series: &MultivariateSeries, cfg: &TrainConfig) -> Result<PreparedData> {
    let spec = cfg.dataset.split_spec();
    if spec.total() > series.len() {
        return Err(Error::Data(format!(
            "dataset {} has {} rows but the split needs {}",
            cfg.dataset.id,
            series.len(),
            spec.total()
        )));
    }
    let (l, t) = (cfg.model.lookback, cfg.model.horizon);
    let train_rows = series.slice_rows(0, spec.train_len);
    let scaler = fit_scaler(&train_rows)?;
    let make = |kind: SplitKind| -> Result<SplitData> {
        let (a, b) = split_segment(spec, kind, l, cfg.dataset.border_overlap);
        let seg = apply_scaler(&series.slice_rows(a, b), &scaler)?;
        let starts = window_starts(seg.len(), l, t, 1).map_err(|e| {
            Error::Data(format!("{kind:?} split of {} rows holds no window: {e}", b - a))
        })?;
        Ok(SplitData {
            kind,
            values: seg.values,
            first_row: a,
            starts,
            lookback: l,
            horizon: t,
        })
    };
    Ok(PreparedData {
        channel_names: series.channel_names.clone(),
        train: make(SplitKind::Train)?,
        val: make(SplitKind::Val)?,
        test: make(SplitKind::Test)?,
        scaler,
    })
}

/// Early stopping on a monitored loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision { improved: true, stop: false }
        } else {
            self.bad_epochs += 1;
            StopDecision {
                improved: false,
                stop: self.bad_epochs >= self.patience,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossTerms,
    pub train_total: f64,
    pub val: LossTerms,
    pub val_total: f64,
    pub seconds: f64,
}

/// `epoch,L_p,L_f,L_c,L_t,total,split`; one train and one val row per epoch.
pub fn loss_curve_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,L_p,L_f,L_c,L_t,total,split\n");
    for r in history {
        for (t, total, split) in [(&r.train, r.train_total, "train"), (&r.val, r.val_total, "val")] {
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, t.l_p, t.l_f, t.l_c, t.l_t, total, split
            );
        }
    }
    out
}

pub struct TrainOutcome {
    pub spec: ModelSpec,
    /// Parameters of the best validation epoch.
    pub params: ModelParams<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn check_finite(terms: &LossTerms, total: f64, epoch: usize, batch: usize) -> Result<()> {
    for (name, v) in [
        ("L_p", terms.l_p),
        ("L_f", terms.l_f),
        ("L_c", terms.l_c),
        ("L_t", terms.l_t),
        ("L_total", total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name, epoch, batch });
        }
    }
    Ok(())
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker threads: {e}")))
}

/// Summed losses and scaled gradient of one batch.
fn batch_gradient(
    params: &ModelParams<f32>,
    spec: &ModelSpec,
    data: &SplitData,
    windows: &[usize],
    workers: &rayon::ThreadPool,
) -> Result<(LossTerms, ModelParams<f32>)> {
    let scale = 1.0 / windows.len() as f32;
    let parts: Vec<Result<(LossTerms, ModelParams<f32>)>> = workers.install(|| {
        windows
            .par_chunks(CHUNK_WINDOWS)
            .map(|chunk| {
                let (input, target) = data.rows::<f32>(chunk);
                let pass = forward_batch(params, spec, input.view(), true)?;
                let sums = loss_sums(spec, &pass, target.view())?;
                let mut grad = params.zeros_like();
                backward(params, spec, &pass, target.view(), scale, &mut grad)?;
                Ok((sums, grad))
            })
            .collect()
    });
    let mut iter = parts.into_iter();
    let (mut sums, mut grad) = iter.next().expect("nonempty batch")?;
    for part in iter {
        let (s, g) = part?;
        sums.add(&s);
        grad.add_assign_from(&g);
    }
    Ok((sums, grad))
}

/// Mean loss terms and weighted total over every window of a split.
pub fn evaluate_loss(params: &ModelParams<f32>, spec: &ModelSpec, data: &SplitData) -> Result<(LossTerms, f64)> {
    let workers = pool(worker_threads())?;
    evaluate_loss_with(params, spec, data, &workers)
}

fn evaluate_loss_with(
    params: &ModelParams<f32>,
    spec: &ModelSpec,
    data: &SplitData,
    workers: &rayon::ThreadPool,
) -> Result<(LossTerms, f64)> {
    let all: Vec<usize> = (0..data.windows()).collect();
    let parts: Vec<Result<LossTerms>> = workers.install(|| {
        all.par_chunks(CHUNK_WINDOWS)
            .map(|chunk| {
                let (input, target) = data.rows::<f32>(chunk);
                let pass = forward_batch(params, spec, input.view(), true)?;
                loss_sums(spec, &pass, target.view())
            })
            .collect()
    });
    let mut sums = LossTerms::default();
    for p in parts {
        sums.add(&p?);
    }
    let mean = sums.scaled(1.0 / data.windows().max(1) as f64);
    Ok((mean, total_of(spec, &mean)))
}

pub fn train(cfg: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    train_with(cfg, data, &mut |_| {})
}

/// Train from a fresh initialization, calling `on_epoch` after every epoch.
pub fn train_with(cfg: &TrainConfig, data: &PreparedData, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let spec = ModelSpec::from_config(cfg, data.channels())?;
    let params = init_params::<f32>(&spec, cfg.training.seed);
    train_from(cfg, spec, params, data, on_epoch)
}

pub fn train_from(
    cfg: &TrainConfig,
    spec: ModelSpec,
    mut params: ModelParams<f32>,
    data: &PreparedData,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if data.train.windows() == 0 || data.val.windows() == 0 {
        return Err(Error::Data("training and validation splits must hold at least one window".into()));
    }
    let workers = pool(worker_threads())?;
    let tc = &cfg.training;
    let mut opt = Adam::new(params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5348_5546_464c_4531);
    let mut order: Vec<usize> = (0..data.train.windows()).collect();
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=tc.max_epochs {
        let started = std::time::Instant::now();
        let lr = learning_rate(tc.initial_lr, epoch);
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let (s, grad) = batch_gradient(&params, &spec, &data.train, batch, &workers)?;
            let mean = s.scaled(1.0 / batch.len() as f64);
            check_finite(&mean, total_of(&spec, &mean), epoch, b)?;
            if grad.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { term: "gradient", epoch, batch: b });
            }
            opt.step(&mut params, &grad, lr);
            sums.add(&s);
        }
        let train = sums.scaled(1.0 / data.train.windows() as f64);
        let (val, val_total) = evaluate_loss_with(&params, &spec, &data.val, &workers)?;
        check_finite(&val, val_total, epoch, usize::MAX)?;
        let record = EpochRecord {
            epoch,
            lr,
            train,
            train_total: total_of(&spec, &train),
            val,
            val_total,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {:.5} val {:.5} ({:.1}s)",
            record.train_total,
            val_total,
            record.seconds
        );
        on_epoch(&record);
        history.push(record);
        let d = stopper.update(epoch, val_total);
        if d.improved {
            best = params.clone();
        }
        if d.stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        spec,
        params: best,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        history,
        stopped_early,
    })
}

/// Quantiles of row `r` at each of `levels`, mapped back through RevIN
/// into the units of the model input. `None` for scalar heads.
pub fn row_quantiles(
    params: &ModelParams<f32>,
    spec: &ModelSpec,
    pass: &ForwardPass<f32>,
    r: usize,
    levels: &[f64],
) -> Option<Vec<Vec<f64>>> {
    let merged = merged_distribution(spec, pass, r)?;
    let ch = r % spec.channels;
    let a = params.revin.scale[ch] as f64;
    let sh = params.revin.shift[ch] as f64;
    let (m, d) = (pass.mean[r] as f64, pass.denom[r] as f64);
    Some(
        levels
            .iter()
            .map(|&alpha| {
                let level = if a < 0.0 { 1.0 - alpha } else { alpha };
                quantile_from_distribution(&merged, level)
                    .into_iter()
                    .map(|v| (v - sh) / a * d + m)
                    .collect()
            })
            .collect(),
    )
}

/// Forecast of one window in the units of the raw data.
#[derive(Clone, Debug)]
pub struct Forecast {
    /// `T x C`
    pub prediction: Array2<f64>,
    /// One `T x C` array per level of [`QUANTILE_LEVELS`]; absent for scalar heads.
    pub quantiles: Option<Vec<Array2<f64>>>,
}

/// Forecast the horizon that follows a raw `L x C` window.
pub fn forecast(params: &ModelParams<f32>, spec: &ModelSpec, scaler: &Scaler, window: &Array2<f64>) -> Result<Forecast> {
    if window.dim() != (spec.lookback(), spec.channels) {
        return Err(Error::Shape(format!(
            "window is {:?}, model expects ({}, {})",
            window.dim(),
            spec.lookback(),
            spec.channels
        )));
    }
    let z = scaler.transform_values(window)?.mapv(|v| v as f32);
    let rows = crate::model::windows_to_rows(&[z.view()]);
    let pass = forward_batch(params, spec, rows.view(), false)?;
    let (t, c) = (spec.horizon(), spec.channels);
    let unscale = |ch: usize, v: f64| v * scaler.std[ch] + scaler.mean[ch];
    let prediction = Array2::from_shape_fn((t, c), |(j, ch)| unscale(ch, pass.prediction[[ch, j]] as f64));
    let per_row: Option<Vec<Vec<Vec<f64>>>> = (0..c)
        .map(|r| row_quantiles(params, spec, &pass, r, &QUANTILE_LEVELS))
        .collect();
    let quantiles = per_row.map(|rows| {
        (0..QUANTILE_LEVELS.len())
            .map(|k| Array2::from_shape_fn((t, c), |(j, ch)| unscale(ch, rows[ch][k][j])))
            .collect()
    });
    Ok(Forecast { prediction, quantiles })
}

/// Per-row model outputs of a whole split, on the standardized data scale.
#[derive(Clone, Debug)]
pub struct PredictionTable {
    pub windows: usize,
    pub channels: usize,
    pub horizon: usize,
    /// `R x T`, row `window * C + channel`.
    pub truth: Array2<f64>,
    pub prediction: Array2<f64>,
    pub weights: Option<Array2<f64>>,
    pub branch_1: Option<Array2<f64>>,
    pub branch_2: Option<Array2<f64>>,
}

impl PredictionTable {
    /// `window,step,channel,truth,prediction,w,x1,x2`
    pub fn write_csv<W: std::io::Write>(&self, out: W, channel_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(["window", "step", "channel", "truth", "prediction", "w", "x1", "x2"])
            .map_err(io)?;
        let opt = |a: &Option<Array2<f64>>, r: usize, t: usize| a.as_ref().map(|a| a[[r, t]].to_string()).unwrap_or_default();
        for b in 0..self.windows {
            for t in 0..self.horizon {
                for ch in 0..self.channels {
                    let r = b * self.channels + ch;
                    w.write_record([
                        b.to_string(),
                        t.to_string(),
                        channel_names.get(ch).cloned().unwrap_or_else(|| ch.to_string()),
                        self.truth[[r, t]].to_string(),
                        self.prediction[[r, t]].to_string(),
                        opt(&self.weights, r, t),
                        opt(&self.branch_1, r, t),
                        opt(&self.branch_2, r, t),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))
    }
}

pub struct Evaluation {
    pub loss: LossTerms,
    pub total: f64,
    pub report: MetricReport,
    pub predictions: PredictionTable,
}

/// Metrics, losses and per-row outputs of `params` on one split.
pub fn evaluate(
    params: &ModelParams<f32>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    data: &PreparedData,
    kind: SplitKind,
) -> Result<Evaluation> {
    let split = data.split(kind);
    let (c, t) = (spec.channels, spec.horizon());
    let n = split.windows();
    let season = cfg.dataset.mase_seasonality().filter(|&s| s < spec.lookback());
    let probabilistic = spec.is_probabilistic();
    let fused = spec.fine.heads.len() == 2 && probabilistic;
    let mut acc = MetricAccumulator::new(c);
    let mut sums = LossTerms::default();
    let mut table = PredictionTable {
        windows: n,
        channels: c,
        horizon: t,
        truth: Array2::zeros((n * c, t)),
        prediction: Array2::zeros((n * c, t)),
        weights: fused.then(|| Array2::zeros((n * c, t))),
        branch_1: fused.then(|| Array2::zeros((n * c, t))),
        branch_2: fused.then(|| Array2::zeros((n * c, t))),
    };
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK_WINDOWS) {
        let (input, target) = split.rows::<f32>(chunk);
        let pass = forward_batch(params, spec, input.view(), true)?;
        sums.add(&loss_sums(spec, &pass, target.view())?);
        let base = chunk[0] * c;
        let rows = chunk.len() * c;
        let dst = s![base..base + rows, ..];
        table.prediction.slice_mut(dst).assign(&pass.prediction.mapv(|v| v as f64));
        table.truth.slice_mut(dst).assign(&target.mapv(|v| v as f64));
        if fused {
            let w = pass.fine.weights.as_ref().expect("fused stage");
            table.weights.as_mut().unwrap().slice_mut(dst).assign(&w.mapv(|v| v as f64));
            for (u, out) in [(0usize, &mut table.branch_1), (1, &mut table.branch_2)] {
                let x = crate::model::denormalize_rows(params, &pass, &pass.fine.units[u].expectation, c);
                out.as_mut().unwrap().slice_mut(dst).assign(&x.mapv(|v| v as f64));
            }
        }
        for (b, &win) in chunk.iter().enumerate() {
            let truth = split.target_window(win);
            let mut pred = Array2::zeros((t, c));
            for ch in 0..c {
                let r = b * c + ch;
                for j in 0..t {
                    pred[[j, ch]] = pass.prediction[[r, j]] as f64;
                }
            }
            let quantiles = if probabilistic {
                let mut qs = vec![Array2::zeros((t, c)); QUANTILE_LEVELS.len()];
                for ch in 0..c {
                    let levels = row_quantiles(params, spec, &pass, b * c + ch, &QUANTILE_LEVELS)
                        .ok_or_else(|| Error::Shape("missing fine distribution".into()))?;
                    for (k, q) in levels.into_iter().enumerate() {
                        for (j, v) in q.into_iter().enumerate() {
                            qs[k][[j, ch]] = v;
                        }
                    }
                }
                Some(qs)
            } else {
                None
            };
            acc.add_window(
                truth,
                pred.view(),
                quantiles.as_deref(),
                season.map(|s| (split.lookback_window(win), s)),
            )?;
        }
    }
    let loss = sums.scaled(1.0 / n.max(1) as f64);
    let split_name = match kind {
        SplitKind::Train => "train",
        SplitKind::Val => "val",
        SplitKind::Test => "test",
    };
    let report = acc.finish(&cfg.dataset.id, t, spec.mode.name(), split_name, &data.channel_names);
    Ok(Evaluation {
        loss,
        total: total_of(spec, &loss),
        report,
        predictions: table,
    })
}
