//! Referring expression comprehension with context regions.
//!
//! An LSTM scores a sentence given a (region, context region) pair. Pair
//! scores are pooled per region with max or noisy-or, and the highest-scoring
//! region is selected along with the context that best supports it. Since
//! context annotations are unavailable, training uses multiple-instance
//! objectives over bags of pairs (see [`mil`]).
//!
//! The numeric modules are generic over [`Real`]; the aliases below fix the
//! scalar to `f64`, which is what training and gradient checks use.

pub mod comprehension;
pub mod error;
pub mod eval;
pub mod features;
pub mod mil;
pub mod num;
pub mod scene;
pub mod seqnet;
pub mod synthgen;

pub use error::{Error, Result};
pub use num::Real;

pub type Model = seqnet::ModelParams<f64>;
pub type Model32 = seqnet::ModelParams<f32>;
pub type Weights = seqnet::Weights<f64>;
pub type Gradients = seqnet::Gradients<f64>;
pub type Trace = seqnet::ForwardTrace<f64>;
pub type Scaler = features::Scaler<f64>;
pub type PairFeatures = features::PairFeatures<f64>;
pub type ScoreTable = mil::PairScoreTable<f64>;
pub type Comprehension = comprehension::ComprehensionResult<f64>;
pub type Checkpoint = seqnet::Checkpoint<f64>;
pub type Trainer = mil::Trainer<f64>;
pub type TrainingSet = mil::TrainingSet<f64>;
