//! Epoch-level training loop shared by all objectives.

use std::collections::BTreeMap;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bags::{sample_hard_negatives, Bag, Pair};
use super::losses::{
    loss_max_likelihood, loss_max_margin, loss_mil_neg, loss_mil_posneg, select_latent_positive, LossOutput, PairScore,
    PairScoreTable,
};
use super::{Objective, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{fit_scaler, region_block, CandidateFeatures, Scaler};
use crate::num::Real;
use crate::scene::{build_vocabulary, CandidateSet, RefExpression, RegionId, Scene, Vocabulary};
use crate::seqnet::{backward_into, forward_logprob, sgd_step, ForwardTrace, Gradients, ModelParams, OptState};

/// Vocabulary from the training expressions and scaling factors from every
/// candidate region (image sentinels included) of the training scenes.
pub fn fit_preprocessing<T: Real>(scenes: &[Scene], min_count: usize) -> Result<(Vocabulary, Scaler<T>)> {
    let corpus: Vec<Vec<String>> = scenes.iter().flat_map(|s| s.expressions.iter().map(|e| e.tokens.clone())).collect();
    let vocab = build_vocabulary(&corpus, min_count)?;
    let mut blocks = Vec::new();
    for s in scenes {
        let c = s.candidates()?;
        blocks.push(region_block::<T>(&c.image_region, &c.image)?);
        for p in &c.proposals {
            blocks.push(region_block::<T>(p, &c.image)?);
        }
    }
    Ok((vocab, fit_scaler(blocks)?))
}

#[derive(Clone, Debug)]
pub struct PreparedScene<T> {
    pub cands: CandidateSet,
    pub feats: CandidateFeatures<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub scene: usize,
    pub expr: RefExpression,
    pub target: RegionId,
}

/// Encoded scenes and expressions. Only tokens and target ids are read from
/// the annotations.
#[derive(Clone, Debug)]
pub struct TrainingSet<T> {
    pub scenes: Vec<PreparedScene<T>>,
    pub examples: Vec<TrainExample>,
}

pub fn prepare_scenes<T: Real>(scenes: &[Scene], vocab: &Vocabulary, scaler: &Scaler<T>) -> Result<TrainingSet<T>> {
    let mut prepared = Vec::with_capacity(scenes.len());
    let mut examples = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        let cands = s.candidates()?;
        if cands.appearance_dim() + crate::features::BBOX_FEATURES != scaler.dim() {
            return Err(Error::DimensionMismatch { expected: scaler.dim(), got: cands.appearance_dim() + 5 });
        }
        let feats = CandidateFeatures::new(&cands, scaler)?;
        for e in &s.expressions {
            let mut expr = vocab.encode(&e.tokens)?;
            expr.target = Some(e.target);
            examples.push(TrainExample { scene: si, expr, target: e.target });
        }
        prepared.push(PreparedScene { cands, feats });
    }
    Ok(TrainingSet { scenes: prepared, examples })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub active_hinge_fraction: f64,
    pub learning_rate: f64,
    pub examples: usize,
}

impl EpochStats {
    /// `epoch \t mean_loss \t active_hinge_fraction \t lr`.
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.mean_loss, self.active_hinge_fraction, self.learning_rate)
    }
}

/// Sampled training bag for one expression: contexts for the positive bag
/// and negative pairs built from hard negatives.
fn sample_bag<R: Rng>(
    cands: &CandidateSet,
    target: RegionId,
    latent: Option<RegionId>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Bag> {
    let others: Vec<RegionId> = cands.proposal_ids().into_iter().filter(|&p| p != target).collect();
    let mut contexts = vec![RegionId::IMAGE];
    let mut pool = others.clone();
    if let Some(rc) = latent.filter(|c| !c.is_image()) {
        contexts.push(rc);
        pool.retain(|&p| p != rc);
    }
    let quota = cfg.context_samples_train.saturating_sub(contexts.len() - 1).min(pool.len());
    contexts.extend(sample(rng, pool.len(), quota).into_iter().map(|i| pool[i]));
    contexts.sort_unstable();

    let mut negative_pairs = Vec::new();
    for n in sample_hard_negatives(cands, target, cfg.hard_negatives_per_expr, rng)? {
        negative_pairs.push((n, RegionId::IMAGE));
        let partners: Vec<RegionId> = cands.proposal_ids().into_iter().filter(|&p| p != n).collect();
        if let Some(&y) = partners.choose(rng) {
            negative_pairs.push((n, y));
        }
    }
    Ok(Bag { target, positive_pairs: contexts.into_iter().map(|c| (target, c)).collect(), negative_pairs })
}

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

struct Scored<T> {
    table: PairScoreTable<T>,
    traces: BTreeMap<Pair, ForwardTrace<T>>,
}

fn score_pairs<T: Real>(
    params: &ModelParams<T>,
    scene: &PreparedScene<T>,
    expr: &RefExpression,
    pairs: impl IntoIterator<Item = Pair>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Scored<T>> {
    let mut table = PairScoreTable::new();
    let mut traces = BTreeMap::new();
    for pair in pairs {
        if traces.contains_key(&pair) {
            continue;
        }
        let feat = scene.feats.pair(pair.0, pair.1)?;
        let tr = forward_logprob(&params.config, &params.weights, expr, &feat, dropout.as_deref_mut())?;
        table.insert(pair, PairScore { logp: tr.logp, word_logps: tr.word_logps.clone() })?;
        traces.insert(pair, tr);
    }
    Ok(Scored { table, traces })
}

/// Loss and gradient contribution of one expression, accumulated into
/// `grads`.
fn example_step<T: Real>(
    params: &ModelParams<T>,
    data: &TrainingSet<T>,
    ex: &TrainExample,
    latent: Option<RegionId>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut Gradients<T>,
) -> Result<LossOutput<T>> {
    let scene = &data.scenes[ex.scene];
    let t = ex.target;
    let (pairs, bag): (Vec<Pair>, Option<Bag>) = match cfg.objective {
        Objective::MaxLikelihood => (vec![(t, RegionId::IMAGE)], None),
        Objective::MaxMargin => {
            let negs = sample_hard_negatives(&scene.cands, t, cfg.hard_negatives_per_expr, rng)?;
            let mut p = vec![(t, RegionId::IMAGE)];
            p.extend(negs.iter().map(|&n| (n, RegionId::IMAGE)));
            (p, None)
        }
        Objective::MilNeg | Objective::MilPosNeg => {
            let lat = if cfg.objective == Objective::MilPosNeg { latent } else { None };
            let bag = sample_bag(&scene.cands, t, lat, cfg, rng)?;
            let p = bag.positive_pairs.iter().chain(&bag.negative_pairs).copied().collect();
            (p, Some(bag))
        }
    };

    let scored = score_pairs(params, scene, &ex.expr, pairs.iter().copied(), Some(rng))?;
    let out = match cfg.objective {
        Objective::MaxLikelihood => loss_max_likelihood(&scored.table, t)?,
        Objective::MaxMargin => {
            let negs: Vec<RegionId> = pairs[1..].iter().map(|p| p.0).collect();
            if negs.is_empty() {
                loss_max_likelihood(&scored.table, t)?
            } else {
                loss_max_margin(&scored.table, t, &negs, cfg)?
            }
        }
        Objective::MilNeg => loss_mil_neg(&scored.table, bag.as_ref().expect("bag"), cfg)?,
        Objective::MilPosNeg => {
            let bag = bag.as_ref().expect("bag");
            let rc = match latent {
                Some(rc) => rc,
                None => select_latent_positive(&scored.table, t, &bag.contexts())?,
            };
            loss_mil_posneg(&scored.table, bag, rc, cfg)?
        }
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss for expression in scene {}", ex.scene)));
    }
    for (pair, g) in &out.grads {
        backward_into(&params.config, &params.weights, &scored.traces[pair], g, grads)?;
    }
    Ok(out)
}

/// Latent positive context per example under the current parameters,
/// dropout off, over every candidate context of the target.
pub fn select_latents<T: Real>(params: &ModelParams<T>, data: &TrainingSet<T>) -> Result<Vec<RegionId>> {
    data.examples
        .iter()
        .map(|ex| {
            let scene = &data.scenes[ex.scene];
            let ctxs = scene.cands.contexts_for(ex.target);
            let scored = score_pairs(params, scene, &ex.expr, ctxs.iter().map(|&c| (ex.target, c)), None)?;
            select_latent_positive(&scored.table, ex.target, &ctxs)
        })
        .collect()
}

/// One pass over the shuffled examples with mini-batch SGD.
pub fn train_epoch<T: Real>(
    params: &mut ModelParams<T>,
    data: &TrainingSet<T>,
    cfg: &TrainConfig,
    opt: &mut OptState,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    opt.validate()?;
    if data.examples.is_empty() {
        return Err(Error::Empty("training examples"));
    }
    let latents = match cfg.objective {
        Objective::MilPosNeg => Some(select_latents(params, data)?),
        _ => None,
    };
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    order.shuffle(&mut example_rng(cfg.rng_seed, epoch, usize::MAX));

    let mut grads = Gradients::zeros(&params.config);
    let mut loss_sum = 0.0;
    let (mut active, mut terms) = (0usize, 0usize);
    for batch in order.chunks(opt.batch_size) {
        grads.fill_zero();
        for &i in batch {
            let mut rng = example_rng(cfg.rng_seed, epoch, i);
            let latent = latents.as_ref().map(|l| l[i]);
            let out = example_step(params, data, &data.examples[i], latent, cfg, &mut rng, &mut grads)?;
            loss_sum += out.loss.as_f64();
            active += out.active_hinges;
            terms += out.hinge_terms;
        }
        grads.scale(T::one() / T::lit(batch.len() as f64));
        sgd_step(&mut params.weights, &grads, opt)?;
    }
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / data.examples.len() as f64,
        active_hinge_fraction: if terms == 0 { 0.0 } else { active as f64 / terms as f64 },
        learning_rate: opt.learning_rate,
        examples: data.examples.len(),
    })
}

/// Model, optimizer state and epoch counter for a multi-epoch run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub params: ModelParams<T>,
    pub opt: OptState,
    pub cfg: TrainConfig,
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(params: ModelParams<T>, opt: OptState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        opt.validate()?;
        params.validate()?;
        Ok(Trainer { params, opt, cfg, epoch: 0 })
    }

    pub fn run_epoch(&mut self, data: &TrainingSet<T>) -> Result<EpochStats> {
        self.epoch += 1;
        train_epoch(&mut self.params, data, &self.cfg, &mut self.opt, self.epoch)
    }

    /// Runs the configured number of epochs, reporting each one.
    pub fn run(&mut self, data: &TrainingSet<T>, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        let mut all = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let s = self.run_epoch(data)?;
            on_epoch(&s);
            all.push(s);
        }
        Ok(all)
    }
}
