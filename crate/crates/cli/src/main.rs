//! `refexp`: generate synthetic scenes, train, evaluate and draw heatmaps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
//! (non-finite loss or gradient), 4 artifact mismatch (checkpoint format,
//! vocabulary or feature layout).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use refexp::comprehension::PoolMode;
use refexp::mil::Objective;
use refexp::scene::RegionId;

mod commands;
mod config;

/// Must equal `refexp::seqnet::CHECKPOINT_VERSION`; checked in tests.
const FORMAT_VERSION: &str = "1";

#[derive(Parser, Debug)]
#[command(name = "refexp", version = FORMAT_VERSION, about = "Referring expression comprehension with context regions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic relational-scene dataset (train.jsonl, val.jsonl).
    GenData(GenDataArgs),
    /// Train a pair scorer and write a checkpoint plus an epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; prints a JSON report.
    Eval(EvalArgs),
    /// Slide a query box over a scene and write expression probabilities.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// The only source of randomness.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Objects per scene, `MIN..MAX` or a single count.
    #[arg(long, value_parser = parse_range)]
    pub objects: Option<[usize; 2]>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Keep at most this many expressions per scene.
    #[arg(long)]
    pub max_expressions: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn objective_parser() -> impl TypedValueParser<Value = Objective> {
    PossibleValuesParser::new(Objective::ALL.map(Objective::name)).map(|s| s.parse::<Objective>().expect("listed name"))
}

fn pool_parser() -> impl TypedValueParser<Value = PoolMode> {
    PossibleValuesParser::new(["noisy-or", "max", "image-only"]).map(|s| s.parse::<PoolMode>().expect("listed name"))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = objective_parser())]
    pub objective: Option<Objective>,
    /// Training scenes (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epoch log path; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_neg: Option<f64>,
    #[arg(long)]
    pub lambda_pos: Option<f64>,
    #[arg(long)]
    pub hard_negatives: Option<usize>,
    #[arg(long)]
    pub train_contexts: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint path.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Evaluation scenes (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = pool_parser())]
    pub pool: Option<PoolMode>,
    #[arg(long)]
    pub max_contexts: Option<usize>,
    /// Worker threads; the report does not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scene file (JSON lines).
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub scene_index: usize,
    #[arg(long)]
    pub expression: String,
    /// Context region: `I` for the image, or a region id.
    #[arg(long)]
    pub context: RegionId,
    /// Query box size, `WxH` or a single side.
    #[arg(long = "box", value_parser = parse_box)]
    pub box_size: (f64, f64),
    #[arg(long, default_value_t = 8.0)]
    pub stride: f64,
    /// Give the query box the mean appearance of this category in the scene.
    #[arg(long)]
    pub category: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (lo, hi) = s.split_once("..").unwrap_or((s, s));
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok([p(lo)?, p(hi)?])
}

fn parse_box(s: &str) -> Result<(f64, f64), String> {
    let (w, h) = s.split_once(['x', 'X']).unwrap_or((s, s));
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(w)?, p(h)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.clap {
                clap_err.exit();
            }
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
