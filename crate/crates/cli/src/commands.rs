use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::CommandFactory;
use log::{info, warn};

use refexp::comprehension::heatmap;
use refexp::eval::evaluate;
use refexp::mil::{fit_preprocessing, prepare_scenes, EpochStats, Trainer};
use refexp::scene::{load_scenes, tokenize, Scene, Vocabulary};
use refexp::seqnet::{init_params, load_checkpoint, save_checkpoint, ModelParams};
use refexp::synthgen::gen_dataset;
use refexp::Error;

use crate::config::{set, RunConfig};
use crate::{Cli, Command, Common, EvalArgs, GenDataArgs, HeatmapArgs, TrainArgs};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
    /// Usage errors are reported by clap, which prints the usage line.
    pub clap: Option<clap::Error>,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into(), clap: None }
    }

    fn mismatch(message: impl Into<String>) -> Self {
        Self::new(EXIT_MISMATCH, message)
    }

    fn missing(subcommand: &str, flag: &str) -> Self {
        let mut cmd = Cli::command();
        cmd.build();
        let sub = cmd.find_subcommand_mut(subcommand).expect("known subcommand");
        let err = sub.error(ErrorKind::MissingRequiredArgument, format!("--{flag} is required (flag or config paths.{flag})"));
        CliError { code: EXIT_USAGE, message: err.to_string(), clap: Some(err) }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(EXIT_USAGE, e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> CliResult {
    match command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Heatmap(a) => cmd_heatmap(a),
    }
}

fn base_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(|m| CliError::new(EXIT_USAGE, m))?;
    set(&mut cfg.seed, common.seed);
    cfg.propagate_seed();
    Ok(cfg)
}

fn required(slot: Option<PathBuf>, subcommand: &str, flag: &str) -> CliResult<PathBuf> {
    slot.ok_or_else(|| CliError::missing(subcommand, flag))
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.synth.scenes, a.scenes);
    set(&mut cfg.synth.objects_per_scene, a.objects);
    set(&mut cfg.synth.val_fraction, a.val_fraction);
    set(&mut cfg.synth.appearance_noise_sigma, a.noise_sigma);
    if a.max_expressions.is_some() {
        cfg.synth.max_expressions_per_scene = a.max_expressions;
    }
    set(&mut cfg.paths.out, a.out.map(Some));
    let out = required(cfg.paths.out.clone(), "gen-data", "out")?;
    let summary = gen_dataset(&cfg.synth, &out)?;
    println!("{}", serde_json::to_string(&summary).expect("plain struct"));
    Ok(())
}

fn load_data(path: &Path) -> CliResult<Vec<Scene>> {
    load_scenes(path).map_err(|e| CliError::new(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.train.objective, a.objective);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.margin, a.margin);
    set(&mut cfg.train.lambda, a.lambda);
    set(&mut cfg.train.lambda_neg, a.lambda_neg);
    set(&mut cfg.train.lambda_pos, a.lambda_pos);
    set(&mut cfg.train.hard_negatives_per_expr, a.hard_negatives);
    set(&mut cfg.train.context_samples_train, a.train_contexts);
    set(&mut cfg.opt.learning_rate, a.lr);
    set(&mut cfg.opt.batch_size, a.batch_size);
    set(&mut cfg.net.hidden_dim, a.hidden_dim);
    set(&mut cfg.net.embed_dim, a.embed_dim);
    set(&mut cfg.net.dropout_ratio, a.dropout);
    set(&mut cfg.min_count, a.min_count);
    set(&mut cfg.paths.data, a.data.map(Some));
    set(&mut cfg.paths.out, a.out.map(Some));
    set(&mut cfg.paths.log, a.log.map(Some));
    let data_path = required(cfg.paths.data.clone(), "train", "data")?;
    let out = required(cfg.paths.out.clone(), "train", "out")?;
    let log_path = cfg.paths.log.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log");
        p.into()
    });
    cfg.train.validate()?;
    let opt = cfg.opt.opt_state();
    opt.validate()?;

    let scenes = load_data(&data_path)?;
    let (vocab, scaler) = fit_preprocessing::<f64>(&scenes, cfg.min_count)?;
    let data = prepare_scenes(&scenes, &vocab, &scaler)?;
    let net = cfg.net.net_config(vocab.len(), 2 * scaler.min.len(), cfg.seed);
    let params = init_params(&net, vocab, scaler)?;
    info!("{} scenes, {} expressions, vocabulary {}", data.scenes.len(), data.examples.len(), net.vocab_size);

    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "# config {}", serde_json::to_string(&cfg).expect("plain struct"))?;
    writeln!(log, "# net {}", serde_json::to_string(&net).expect("plain struct"))?;
    writeln!(log, "# epoch\tmean_loss\tactive_hinge_fraction\tlearning_rate")?;
    let mut trainer = Trainer::new(params, opt, cfg.train.clone())?;
    let mut write_err = None;
    let result = trainer.run(&data, |s: &EpochStats| {
        info!("{}", s.log_line());
        if let Err(e) = writeln!(log, "{}", s.log_line()) {
            write_err.get_or_insert(e);
        }
    });
    log.flush()?;
    result?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    save_checkpoint(&trainer.params, &trainer.opt, &out)?;
    Ok(())
}

/// Checkpoint errors other than a missing file mean the artifact does not fit
/// this build.
fn load_model(path: &Path) -> CliResult<ModelParams<f64>> {
    match load_checkpoint::<f64>(path) {
        Ok(c) => Ok(c.params),
        Err(Error::Io(e)) => Err(CliError::new(EXIT_USAGE, format!("{}: {e}", path.display()))),
        Err(e) => Err(CliError::mismatch(format!("{}: {e}", path.display()))),
    }
}

/// Share of dataset words the vocabulary knows, reserved tokens excluded.
fn vocabulary_coverage(vocab: &Vocabulary, scenes: &[Scene]) -> f64 {
    let words: Vec<&String> = scenes.iter().flat_map(|s| &s.expressions).flat_map(|e| &e.tokens).collect();
    if words.is_empty() {
        return 1.0;
    }
    let known = words.iter().filter(|w| vocab.index_of(w).is_some_and(|i| i > Vocabulary::UNK)).count();
    known as f64 / words.len() as f64
}

/// Datasets must share the feature layout of the checkpoint, and most of
/// their words must be in its vocabulary.
fn check_compatible(params: &ModelParams<f64>, scenes: &[Scene]) -> CliResult {
    let adim = params.appearance_dim();
    if let Some(r) = scenes.iter().flat_map(|s| &s.regions).find(|r| r.appearance.len() != adim) {
        return Err(CliError::mismatch(format!(
            "region {} has {} appearance features, checkpoint expects {adim}",
            r.id,
            r.appearance.len()
        )));
    }
    let coverage = vocabulary_coverage(&params.vocab, scenes);
    if coverage < 0.5 {
        return Err(CliError::mismatch(format!("only {:.0}% of dataset words are in the checkpoint vocabulary", coverage * 100.0)));
    }
    if coverage < 1.0 {
        warn!("{:.1}% of dataset words map to <unk>", (1.0 - coverage) * 100.0);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.eval.pool, a.pool);
    set(&mut cfg.eval.max_contexts, a.max_contexts);
    set(&mut cfg.eval.threads, a.threads);
    set(&mut cfg.paths.model, a.model.map(Some));
    set(&mut cfg.paths.data, a.data.map(Some));
    let model = required(cfg.paths.model.clone(), "eval", "model")?;
    let data = required(cfg.paths.data.clone(), "eval", "data")?;
    if cfg.eval.threads == 0 || cfg.eval.max_contexts == 0 {
        return Err(CliError::new(EXIT_USAGE, "threads and max-contexts must be >= 1"));
    }
    let params = load_model(&model)?;
    let scenes = load_data(&data)?;
    check_compatible(&params, &scenes)?;
    let report = evaluate(&params, &scenes, cfg.eval.pool, cfg.eval.max_contexts, cfg.eval.threads)?;
    println!("{}", serde_json::to_string(&report).expect("plain struct"));
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> CliResult {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.paths.model, a.model.map(Some));
    let model = required(cfg.paths.model.clone(), "heatmap", "model")?;
    let params = load_model(&model)?;
    let scenes = load_data(&a.scenes)?;
    let scene = scenes
        .get(a.scene_index)
        .ok_or_else(|| CliError::new(EXIT_USAGE, format!("scene index {} out of range ({} scenes)", a.scene_index, scenes.len())))?;
    check_compatible(&params, std::slice::from_ref(scene))?;
    let cands = scene.candidates()?;
    let context = cands.region(a.context)?;
    let appearance = match &a.category {
        None => None,
        Some(cat) => {
            let members: Vec<&[f64]> =
                scene.regions.iter().filter(|r| &r.category == cat).map(|r| r.appearance.as_slice()).collect();
            if members.is_empty() {
                return Err(CliError::new(EXIT_USAGE, format!("no region of category {cat:?} in scene {}", a.scene_index)));
            }
            let mut mean = vec![0.0; params.appearance_dim()];
            for m in &members {
                for (acc, v) in mean.iter_mut().zip(*m) {
                    *acc += v / members.len() as f64;
                }
            }
            Some(mean)
        }
    };
    let expr = params.vocab.encode(&tokenize(&a.expression))?;
    let map = heatmap(&params, &expr, context, a.box_size, a.stride, &cands.image, appearance.as_deref())?;
    match a.out {
        Some(path) => std::fs::write(&path, map.to_text())?,
        None => print!("{}", map.to_text()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::NonFinite("loss".into())).code, EXIT_NUMERIC);
        assert_eq!(CliError::from(Error::Config("x".into())).code, EXIT_USAGE);
        assert_eq!(CliError::mismatch("x").code, EXIT_MISMATCH);
        assert_eq!(CliError::missing("gen-data", "out").code, EXIT_USAGE);
    }

    #[test]
    fn coverage_counts_known_words() {
        let words = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let vocab = refexp::scene::build_vocabulary(&[words("red ball")], 1).unwrap();
        let scene = |t: &str| Scene {
            image: refexp::scene::ImageMeta::new(10.0, 10.0).unwrap(),
            regions: vec![],
            expressions: vec![refexp::scene::ExpressionRecord { tokens: words(t), target: refexp::scene::RegionId(1), landmark: None }],
        };
        assert_eq!(vocabulary_coverage(&vocab, &[scene("red ball")]), 1.0);
        assert_eq!(vocabulary_coverage(&vocab, &[scene("blue ball")]), 0.5);
        assert_eq!(vocabulary_coverage(&vocab, &[scene("green box")]), 0.0);
    }
}
