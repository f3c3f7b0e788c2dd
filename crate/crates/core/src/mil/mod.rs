//! Bags of (region, context) pairs and the objectives trained on them.

mod bags;
mod losses;
mod train;

pub use bags::{build_bags, sample_hard_negatives, Bag, Pair};
pub use losses::{
    hinge_word_margin, loss_max_likelihood, loss_max_margin, loss_mil_neg, loss_mil_posneg, pool_positive_logprob,
    select_latent_positive, Hinge, LossOutput, PairScore, PairScoreTable,
};
pub use train::{
    fit_preprocessing, prepare_scenes, train_epoch, EpochStats, PreparedScene, TrainExample, Trainer, TrainingSet,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Likelihood of the expression for (target, image).
    #[serde(rename = "ml")]
    MaxLikelihood,
    /// Likelihood plus a word-level margin against other regions paired
    /// with the image.
    #[serde(rename = "maxmargin")]
    MaxMargin,
    /// Margin between the max-pooled positive bag and sampled negative pairs.
    #[serde(rename = "mil-neg")]
    MilNeg,
    /// As `MilNeg`, plus margins against the non-selected pairs of the
    /// positive bag.
    #[serde(rename = "mil-posneg")]
    MilPosNeg,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::MaxLikelihood, Objective::MaxMargin, Objective::MilNeg, Objective::MilPosNeg];

    pub fn name(self) -> &'static str {
        match self {
            Objective::MaxLikelihood => "ml",
            Objective::MaxMargin => "maxmargin",
            Objective::MilNeg => "mil-neg",
            Objective::MilPosNeg => "mil-posneg",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub margin: f64,
    pub lambda: f64,
    pub lambda_neg: f64,
    pub lambda_pos: f64,
    pub hard_negatives_per_expr: usize,
    pub context_samples_train: usize,
    pub context_samples_test_max: usize,
    pub epochs: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::MilNeg,
            margin: 0.1,
            lambda: 1.0,
            lambda_neg: 1.0,
            lambda_pos: 1.0,
            hard_negatives_per_expr: 5,
            context_samples_train: 5,
            context_samples_test_max: 10,
            epochs: 30,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return Err(Error::Config("margin must be positive".into()));
        }
        if [self.lambda, self.lambda_neg, self.lambda_pos].iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("margin weights must be finite and >= 0".into()));
        }
        if self.hard_negatives_per_expr == 0 || self.context_samples_train == 0 || self.context_samples_test_max == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        Ok(())
    }
}
