use serde::{Deserialize, Serialize};

use super::{Gradients, Weights};
use crate::error::{Error, Result};
use crate::num::Real;

/// Plain SGD with a step-halving learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptState {
    pub learning_rate: f64,
    pub halving_period_iters: u64,
    pub iteration: u64,
    pub batch_size: usize,
}

impl Default for OptState {
    fn default() -> Self {
        OptState { learning_rate: 0.01, halving_period_iters: 50_000, iteration: 0, batch_size: 16 }
    }
}

impl OptState {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.halving_period_iters == 0 || self.batch_size == 0 {
            return Err(Error::Config("halving period and batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// Counts one iteration, halving the rate whenever the counter reaches a
    /// multiple of the halving period.
    pub fn advance(&mut self) {
        self.iteration += 1;
        if self.iteration.is_multiple_of(self.halving_period_iters) {
            self.learning_rate *= 0.5;
        }
    }
}

/// `param -= lr * grad`.
pub fn sgd_update<T: Real>(param: &mut [T], grad: &[T], lr: T) {
    for (p, &g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Applies one update with the batch-mean gradient `grads` and advances the
/// schedule. Non-finite gradients abort without touching the parameters.
pub fn sgd_step<T: Real>(weights: &mut Weights<T>, grads: &Gradients<T>, opt: &mut OptState) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("gradient at iteration {}", opt.iteration)));
    }
    let lr = T::lit(opt.learning_rate);
    for ((_, p), (_, g)) in weights.tensors_mut().into_iter().zip(grads.tensors()) {
        if p.dims != g.dims {
            return Err(Error::DimensionMismatch { expected: p.len(), got: g.len() });
        }
        sgd_update(&mut p.data, &g.data, lr);
    }
    opt.advance();
    Ok(())
}
