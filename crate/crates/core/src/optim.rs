//! Adam and the step-decay learning-rate schedule.

use crate::params::ParamSet;
use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Epochs trained at the initial rate before decay starts.
pub const LR_HOLD_EPOCHS: usize = 3;
pub const LR_DECAY: f64 = 0.9;

/// Learning rate of 1-based `epoch`: constant for the first three epochs,
/// then `lr0 * 0.9^(epoch - 3)`.
pub fn learning_rate(initial: f64, epoch: usize) -> f64 {
    initial * LR_DECAY.powi(epoch.saturating_sub(LR_HOLD_EPOCHS) as i32)
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of `params` against the gradient `grad` of the same layout.
    pub fn step<F: Real, P: ParamSet<F>>(&mut self, params: &mut P, grad: &P, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        let g = grad.flatten();
        assert_eq!(g.len(), self.m.len(), "gradient size differs from optimizer state");
        let mut off = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |p| {
            for (i, x) in p.iter_mut().enumerate() {
                let k = off + i;
                let gk = g[k].as_f64();
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= F::lit(lr * mhat / (vhat.sqrt() + ADAM_EPS));
            }
            off += p.len();
        });
    }
}
