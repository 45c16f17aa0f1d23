//! Central finite-difference verification of the analytic gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::model::{init_params, loss_and_grad, total_loss_of, ModelParams, ModelSpec};
use crate::params::ParamSet;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Random smooth-ish inputs and targets for `windows` windows.
pub fn synthetic_batch(spec: &ModelSpec, windows: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = windows * spec.channels;
    let (l, t) = (spec.lookback(), spec.horizon());
    let mut input = Array2::zeros((rows, l));
    let mut target = Array2::zeros((rows, t));
    for r in 0..rows {
        let phase: f64 = rng.random_range(0.0..6.3);
        let amp: f64 = rng.random_range(0.5..2.0);
        let level: f64 = rng.random_range(-1.0..1.0);
        for j in 0..l + t {
            let v = level + amp * (phase + 0.4 * j as f64).sin() + rng.random_range(-0.3..0.3);
            if j < l {
                input[[r, j]] = v;
            } else {
                target[[r, j - l]] = v;
            }
        }
    }
    (input, target)
}

/// Compare analytic and central-difference gradients of the weighted total
/// for every parameter of a freshly initialized model.
pub fn gradient_check(cfg: &TrainConfig, channels: usize, windows: usize, seed: u64, step: f64) -> Result<GradCheckReport> {
    let spec = ModelSpec::from_config(cfg, channels)?;
    let params: ModelParams<f64> = init_params(&spec, seed);
    let (input, target) = synthetic_batch(&spec, windows, seed.wrapping_add(1));
    let (_, loss, grad) = loss_and_grad(&params, &spec, input.view(), target.view())?;
    let analytic = grad.flatten();
    let base = params.flatten();
    let mut names = Vec::new();
    params.visit("", &mut |t| names.push((t.name, t.values.len())));

    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut tensors = Vec::with_capacity(names.len());
    let (mut max_rel, mut worst) = (0.0f64, String::new());
    let mut off = 0;
    for (name, len) in names {
        let (mut t_rel, mut t_abs) = (0.0f64, 0.0f64);
        for i in off..off + len {
            flat[i] = base[i] + step;
            probe.assign_flat(&flat);
            let up = total_loss_of(&probe, &spec, input.view(), target.view())?;
            flat[i] = base[i] - step;
            probe.assign_flat(&flat);
            let down = total_loss_of(&probe, &spec, input.view(), target.view())?;
            flat[i] = base[i];
            let numeric = (up - down) / (2.0 * step);
            let rel = relative_error(analytic[i], numeric);
            t_rel = t_rel.max(rel);
            t_abs = t_abs.max((analytic[i] - numeric).abs());
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{}]", i - off);
            }
        }
        tensors.push(TensorCheck {
            name,
            max_rel_error: t_rel,
            max_abs_error: t_abs,
        });
        off += len;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked: off,
        step,
        tensors,
        loss,
    })
}
