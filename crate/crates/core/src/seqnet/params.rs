use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetConfig;
use crate::error::{Error, Result};
use crate::features::Scaler;
use crate::num::Real;
use crate::scene::Vocabulary;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let w = self.dims[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let w = self.dims[1];
        &mut self.data[r * w..(r + 1) * w]
    }
}

/// Learnable tensors. Gate rows of `lstm_w` are ordered input, forget,
/// output, candidate; columns are `[embedding | pair features | h_prev]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub embedding: Tensor<T>,
    pub lstm_w: Tensor<T>,
    pub lstm_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

/// Gradients share the parameter layout.
pub type Gradients<T> = Weights<T>;

impl<T: Real> Weights<T> {
    pub const NAMES: [&'static str; 5] = ["embedding", "lstm_w", "lstm_b", "out_w", "out_b"];

    pub fn zeros(cfg: &NetConfig) -> Self {
        let h4 = 4 * cfg.hidden_dim;
        Weights {
            embedding: Tensor::zeros(&[cfg.vocab_size, cfg.embed_dim]),
            lstm_w: Tensor::zeros(&[h4, cfg.gate_input_dim()]),
            lstm_b: Tensor::zeros(&[h4]),
            out_w: Tensor::zeros(&[cfg.vocab_size, cfg.hidden_dim]),
            out_b: Tensor::zeros(&[cfg.vocab_size]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 5] {
        [
            ("embedding", &self.embedding),
            ("lstm_w", &self.lstm_w),
            ("lstm_b", &self.lstm_b),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 5] {
        [
            ("embedding", &mut self.embedding),
            ("lstm_w", &mut self.lstm_w),
            ("lstm_b", &mut self.lstm_b),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ]
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn shapes_match(&self, cfg: &NetConfig) -> bool {
        let z = Self::zeros(cfg);
        let ok = self.tensors().iter().zip(z.tensors()).all(|((_, a), (_, b))| a.dims == b.dims && a.data.len() == b.data.len());
        ok
    }
}

/// Network weights plus the frozen preprocessing they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: NetConfig,
    pub weights: Weights<T>,
    pub vocab: Vocabulary,
    pub scaler: Scaler<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if !self.weights.shapes_match(&self.config) {
            return Err(Error::Config("tensor shapes do not match network config".into()));
        }
        if self.vocab.len() != self.config.vocab_size {
            return Err(Error::DimensionMismatch { expected: self.config.vocab_size, got: self.vocab.len() });
        }
        if 2 * self.scaler.dim() != self.config.pair_feature_dim {
            return Err(Error::DimensionMismatch { expected: self.config.pair_feature_dim, got: 2 * self.scaler.dim() });
        }
        Ok(())
    }

    pub fn appearance_dim(&self) -> usize {
        self.scaler.dim() - crate::features::BBOX_FEATURES
    }
}

/// Weights uniform in `[-init_scale, init_scale]`, biases zero.
pub fn init_weights<T: Real>(cfg: &NetConfig) -> Result<Weights<T>> {
    cfg.validate()?;
    let mut w = Weights::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let s = cfg.init_scale;
    for t in [&mut w.embedding, &mut w.lstm_w, &mut w.out_w] {
        for v in t.data.iter_mut() {
            *v = if s > 0.0 { T::lit(rng.gen_range(-s..=s)) } else { T::zero() };
        }
    }
    Ok(w)
}

pub fn init_params<T: Real>(cfg: &NetConfig, vocab: Vocabulary, scaler: Scaler<T>) -> Result<ModelParams<T>> {
    let p = ModelParams { config: cfg.clone(), weights: init_weights(cfg)?, vocab, scaler };
    p.validate()?;
    Ok(p)
}
