//! LSTM sentence scorer conditioned on (region, context) pair features.
//!
//! At every timestep the word embedding is concatenated with the pair
//! features and fed to a single LSTM layer; a softmax over the vocabulary
//! predicts the next token. Forward and backward passes are written out by
//! hand and checked against finite differences in [`gradcheck`].

mod checkpoint;
pub mod gradcheck;
mod lstm;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use lstm::{backward, backward_into, forward_logprob, ForwardTrace, StepCache};
pub use optim::{sgd_step, sgd_update, OptState};
pub use params::{init_params, init_weights, Gradients, ModelParams, Tensor, Weights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub pair_feature_dim: usize,
    pub dropout_ratio: f64,
    pub init_scale: f64,
    pub rng_seed: u64,
}

impl NetConfig {
    /// Desk-scale defaults; the reference architecture uses 1024 for both
    /// hidden and embedding sizes.
    pub fn new(vocab_size: usize, pair_feature_dim: usize) -> Self {
        NetConfig {
            hidden_dim: 64,
            embed_dim: 64,
            vocab_size,
            pair_feature_dim,
            dropout_ratio: 0.5,
            init_scale: 0.08,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.vocab_size == 0 || self.pair_feature_dim == 0 {
            return Err(Error::Config("network dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::Config("dropout_ratio must lie in [0, 1)".into()));
        }
        if self.init_scale < 0.0 || !self.init_scale.is_finite() {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Width of the LSTM input-plus-recurrent weight rows.
    pub fn gate_input_dim(&self) -> usize {
        self.embed_dim + self.pair_feature_dim + self.hidden_dim
    }
}
