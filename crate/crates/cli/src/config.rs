//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use refexp::comprehension::PoolMode;
use refexp::mil::TrainConfig;
use refexp::seqnet::{NetConfig, OptState};
use refexp::synthgen::SynthConfig;

/// Network sizes that are not derived from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub dropout_ratio: f64,
    pub init_scale: f64,
}

impl Default for NetSection {
    fn default() -> Self {
        let d = NetConfig::new(1, 1);
        NetSection { hidden_dim: d.hidden_dim, embed_dim: d.embed_dim, dropout_ratio: d.dropout_ratio, init_scale: d.init_scale }
    }
}

impl NetSection {
    pub fn net_config(&self, vocab_size: usize, pair_feature_dim: usize, seed: u64) -> NetConfig {
        NetConfig {
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            vocab_size,
            pair_feature_dim,
            dropout_ratio: self.dropout_ratio,
            init_scale: self.init_scale,
            rng_seed: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub halving_period_iters: u64,
}

impl Default for OptSection {
    fn default() -> Self {
        let d = OptState::default();
        OptSection { learning_rate: d.learning_rate, batch_size: d.batch_size, halving_period_iters: d.halving_period_iters }
    }
}

impl OptSection {
    pub fn opt_state(&self) -> OptState {
        OptState {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            halving_period_iters: self.halving_period_iters,
            iteration: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pool: PoolMode,
    pub max_contexts: usize,
    pub threads: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { pool: PoolMode::NoisyOr, max_contexts: TrainConfig::default().context_samples_test_max, threads: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, weight init, dropout and sampling.
    pub seed: u64,
    /// Words seen fewer times in training map to `<unk>`.
    pub min_count: usize,
    pub synth: SynthConfig,
    pub net: NetSection,
    pub train: TrainConfig,
    pub opt: OptSection,
    pub eval: EvalSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            min_count: 5,
            synth: SynthConfig::default(),
            net: NetSection::default(),
            train: TrainConfig::default(),
            opt: OptSection::default(),
            eval: EvalSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Copies the single seed into every component that draws random numbers.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.rng_seed = self.seed;
    }
}

/// Overwrites `slot` when a flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
