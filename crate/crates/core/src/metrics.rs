//! Point and probabilistic forecast metrics.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probhead::MergedDistribution;

/// Quantile levels of the CRPS approximation.
pub const QUANTILE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Denominator guard of MASE.
pub const MASE_EPS: f64 = 1e-8;

/// Denominator guard of wQL when the truth is all zero.
pub const WQL_EPS: f64 = 1e-8;

fn same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric operands have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(truth: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<f64> {
    same_shape(&truth, &pred)?;
    let n = truth.len() as f64;
    Ok(truth.iter().zip(pred.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn mae(truth: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<f64> {
    same_shape(&truth, &pred)?;
    let n = truth.len() as f64;
    Ok(truth.iter().zip(pred.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

fn check_level(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// `max(alpha * (y - q), (1 - alpha) * (q - y))`
pub fn quantile_loss(q: f64, y: f64, alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    Ok(pinball(q, y, alpha))
}

fn pinball(q: f64, y: f64, alpha: f64) -> f64 {
    (alpha * (y - q)).max((1.0 - alpha) * (q - y))
}

/// Quantile of one probability row over sorted `points`.
///
/// Each point with positive mass is placed at the middle of its CDF step;
/// levels between two such points interpolate linearly and levels outside
/// are clamped to the extreme points.
pub fn quantile_of_row(points: &[f64], probs: ArrayView1<f64>, alpha: f64) -> f64 {
    let mut cum = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut last = points[0];
    for (&p, &m) in points.iter().zip(probs.iter()) {
        if m <= 0.0 {
            continue;
        }
        let mid = cum + 0.5 * m;
        cum += m;
        match prev {
            None if alpha <= mid => return p,
            Some((p0, f0)) if alpha <= mid => {
                return p0 + (alpha - f0) / (mid - f0) * (p - p0);
            }
            _ => {}
        }
        prev = Some((p, mid));
        last = p;
    }
    last
}

/// Per-step quantile of a merged distribution.
pub fn quantile_from_distribution(merged: &MergedDistribution, alpha: f64) -> Vec<f64> {
    merged
        .probs
        .rows()
        .into_iter()
        .map(|row| quantile_of_row(&merged.points, row, alpha))
        .collect()
}

/// `2 * sum Lambda_alpha(q, y) / sum |y|` per channel of `T x C` inputs,
/// averaged over channels.
pub fn wql(quantiles: ArrayView2<f64>, truth: ArrayView2<f64>, alpha: f64) -> Result<f64> {
    same_shape(&quantiles, &truth)?;
    check_level(alpha)?;
    let c = truth.ncols();
    let mut total = 0.0;
    for ch in 0..c {
        let (q, y) = (quantiles.column(ch), truth.column(ch));
        let num: f64 = q.iter().zip(y.iter()).map(|(&q, &y)| pinball(q, y, alpha)).sum();
        total += 2.0 * num / guarded_abs_sum(y.iter().map(|v| v.abs()).sum());
    }
    Ok(total / c as f64)
}

fn guarded_abs_sum(s: f64) -> f64 {
    if s > 0.0 {
        s
    } else {
        log::warn!("wQL denominator is zero; using {WQL_EPS}");
        WQL_EPS
    }
}

/// Mean of the wQL at the nine standard levels. `merged[c]` is the
/// distribution of channel `c`; `truth` is `T x C`.
pub fn crps_approx(merged: &[MergedDistribution], truth: ArrayView2<f64>) -> Result<f64> {
    let (t, c) = truth.dim();
    if merged.len() != c || merged.iter().any(|m| m.steps() != t) {
        return Err(Error::Shape(format!(
            "need {c} merged distributions of {t} steps"
        )));
    }
    let mut sum = 0.0;
    for &alpha in &QUANTILE_LEVELS {
        let mut q = Array2::zeros((t, c));
        for (ch, m) in merged.iter().enumerate() {
            for (i, v) in quantile_from_distribution(m, alpha).into_iter().enumerate() {
                q[[i, ch]] = v;
            }
        }
        sum += wql(q.view(), truth, alpha)?;
    }
    Ok(sum / QUANTILE_LEVELS.len() as f64)
}

/// Seasonal-naive scaled absolute error of one `T x C` window.
pub fn mase(truth: ArrayView2<f64>, pred: ArrayView2<f64>, lookback: ArrayView2<f64>, seasonality: usize) -> Result<f64> {
    same_shape(&truth, &pred)?;
    let (l, c) = lookback.dim();
    if c != truth.ncols() {
        return Err(Error::Shape(format!(
            "lookback has {c} channels, truth has {}",
            truth.ncols()
        )));
    }
    if seasonality == 0 || l <= seasonality {
        return Err(Error::InvalidArgument(format!(
            "MASE needs lookback {l} > seasonality {seasonality}"
        )));
    }
    let t = truth.nrows() as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let num: f64 = truth
            .column(ch)
            .iter()
            .zip(pred.column(ch).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let x = lookback.column(ch);
        let den: f64 = (0..l - seasonality).map(|i| (x[i + seasonality] - x[i]).abs()).sum();
        if den == 0.0 {
            log::warn!("MASE denominator is zero for channel {ch}; using {MASE_EPS}");
        }
        total += (l - seasonality) as f64 / t * num / (den + MASE_EPS);
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: String,
    pub mse: f64,
    pub mae: f64,
    pub crps: Option<f64>,
    pub mase: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub horizon: usize,
    pub mode: String,
    pub split: String,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    pub crps: Option<f64>,
    pub mase: Option<f64>,
    pub quantile_levels: Vec<f64>,
    pub per_channel: Vec<ChannelMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    /// One row for the aggregate followed by one per channel.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("dataset,horizon,mode,split,channel,mse,mae,crps,mase\n");
        let head = format!("{},{},{},{}", self.dataset, self.horizon, self.mode, self.split);
        s += &format!("{head},all,{},{},{},{}\n", self.mse, self.mae, opt(self.crps), opt(self.mase));
        for ch in &self.per_channel {
            s += &format!(
                "{head},{},{},{},{},{}\n",
                ch.channel,
                ch.mse,
                ch.mae,
                opt(ch.crps),
                opt(ch.mase)
            );
        }
        s
    }
}

/// Streaming accumulation of every metric over many windows.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    channels: usize,
    windows: usize,
    elements: Vec<usize>,
    sq: Vec<f64>,
    abs: Vec<f64>,
    abs_truth: Vec<f64>,
    /// `C x K` pinball sums.
    pinball: Array2<f64>,
    has_quantiles: bool,
    mase_sum: Vec<f64>,
    mase_count: usize,
}

impl MetricAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            windows: 0,
            elements: vec![0; channels],
            sq: vec![0.0; channels],
            abs: vec![0.0; channels],
            abs_truth: vec![0.0; channels],
            pinball: Array2::zeros((channels, QUANTILE_LEVELS.len())),
            has_quantiles: false,
            mase_sum: vec![0.0; channels],
            mase_count: 0,
        }
    }

    /// Add one `T x C` window; `quantiles[k]` is the `T x C` quantile at level `k`.
    pub fn add_window(
        &mut self,
        truth: ArrayView2<f64>,
        pred: ArrayView2<f64>,
        quantiles: Option<&[Array2<f64>]>,
        lookback: Option<(ArrayView2<f64>, usize)>,
    ) -> Result<()> {
        same_shape(&truth, &pred)?;
        if truth.ncols() != self.channels {
            return Err(Error::Shape("window channel count changed".into()));
        }
        self.windows += 1;
        for ch in 0..self.channels {
            for (&a, &b) in truth.column(ch).iter().zip(pred.column(ch).iter()) {
                self.sq[ch] += (a - b) * (a - b);
                self.abs[ch] += (a - b).abs();
                self.abs_truth[ch] += a.abs();
            }
            self.elements[ch] += truth.nrows();
        }
        if let Some(qs) = quantiles {
            self.has_quantiles = true;
            for (k, q) in qs.iter().enumerate() {
                same_shape(&q.view(), &truth)?;
                let alpha = QUANTILE_LEVELS[k];
                for ch in 0..self.channels {
                    let s: f64 = q
                        .column(ch)
                        .iter()
                        .zip(truth.column(ch).iter())
                        .map(|(&q, &y)| pinball(q, y, alpha))
                        .sum();
                    self.pinball[[ch, k]] += s;
                }
            }
        }
        if let Some((lb, season)) = lookback {
            if lb.nrows() > season {
                self.mase_count += 1;
                for ch in 0..self.channels {
                    let one = mase(
                        truth.slice(ndarray::s![.., ch..ch + 1]),
                        pred.slice(ndarray::s![.., ch..ch + 1]),
                        lb.slice(ndarray::s![.., ch..ch + 1]),
                        season,
                    )?;
                    self.mase_sum[ch] += one;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self, dataset: &str, horizon: usize, mode: &str, split: &str, names: &[String]) -> MetricReport {
        let c = self.channels;
        let mut per_channel = Vec::with_capacity(c);
        for ch in 0..c {
            let n = self.elements[ch].max(1) as f64;
            let crps = self.has_quantiles.then(|| {
                let den = guarded_abs_sum(self.abs_truth[ch]);
                self.pinball.row(ch).iter().map(|s| 2.0 * s / den).sum::<f64>() / QUANTILE_LEVELS.len() as f64
            });
            let mase = (self.mase_count > 0).then(|| self.mase_sum[ch] / self.mase_count as f64);
            per_channel.push(ChannelMetrics {
                channel: names.get(ch).cloned().unwrap_or_else(|| format!("ch{ch}")),
                mse: self.sq[ch] / n,
                mae: self.abs[ch] / n,
                crps,
                mase,
            });
        }
        let mean = |f: &dyn Fn(&ChannelMetrics) -> f64| per_channel.iter().map(f).sum::<f64>() / c as f64;
        let mean_opt = |f: &dyn Fn(&ChannelMetrics) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = per_channel.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / c as f64)
        };
        MetricReport {
            dataset: dataset.to_string(),
            horizon,
            mode: mode.to_string(),
            split: split.to_string(),
            windows: self.windows,
            mse: mean(&|m| m.mse),
            mae: mean(&|m| m.mae),
            crps: mean_opt(&|m| m.crps),
            mase: mean_opt(&|m| m.mase),
            quantile_levels: QUANTILE_LEVELS.to_vec(),
            per_channel,
        }
    }
}
