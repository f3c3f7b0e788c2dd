//! Training objectives over cached pair scores.
//!
//! Every loss returns its value together with `d loss / d logp_word` for each
//! pair it touched; feeding those vectors to the backward pass of the
//! corresponding forward trace gives the parameter gradient.

use std::collections::BTreeMap;

use super::bags::{Bag, Pair};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::scene::RegionId;

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore<T> {
    pub logp: T,
    pub word_logps: Vec<T>,
}

/// Sentence log-probabilities keyed by `(region, context)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScoreTable<T> {
    scores: BTreeMap<Pair, PairScore<T>>,
}

impl<T: Real> Default for PairScoreTable<T> {
    fn default() -> Self {
        PairScoreTable { scores: BTreeMap::new() }
    }
}

impl<T: Real> PairScoreTable<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: Pair, score: PairScore<T>) -> Result<()> {
        if pair.0 == pair.1 {
            return Err(Error::Config(format!("self pair ({}, {})", pair.0, pair.1)));
        }
        if !score.logp.is_finite() || score.logp > T::zero() {
            return Err(Error::NonFinite(format!("log-probability {} for ({}, {})", score.logp, pair.0, pair.1)));
        }
        self.scores.insert(pair, score);
        Ok(())
    }

    /// Convenience for tests and callers that only have sentence scores.
    pub fn insert_logp(&mut self, pair: Pair, logp: T) -> Result<()> {
        self.insert(pair, PairScore { logp, word_logps: vec![logp] })
    }

    pub fn get(&self, pair: Pair) -> Result<&PairScore<T>> {
        self.scores.get(&pair).ok_or(Error::MissingScore(pair.0, pair.1))
    }

    pub fn contains(&self, pair: Pair) -> bool {
        self.scores.contains_key(&pair)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.scores.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Pair, &PairScore<T>)> {
        self.scores.iter()
    }

    /// Scored contexts of `region`, ascending id.
    pub fn contexts_of(&self, region: RegionId) -> Vec<RegionId> {
        self.scores.range((region, RegionId(0))..=(region, RegionId(u32::MAX))).map(|(&(_, c), _)| c).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hinge<T> {
    pub value: T,
    pub pos_grad: Vec<T>,
    pub neg_grad: Vec<T>,
    pub active: usize,
    pub terms: usize,
}

/// `sum_t max(0, M - pos_t + neg_t)` over the common prefix of the two word
/// sequences. A term of exactly zero counts as inactive.
pub fn hinge_word_margin<T: Real>(pos: &[T], neg: &[T], margin: T) -> Result<Hinge<T>> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("hinge word sequence"));
    }
    let n = pos.len().min(neg.len());
    let mut h = Hinge {
        value: T::zero(),
        pos_grad: vec![T::zero(); pos.len()],
        neg_grad: vec![T::zero(); neg.len()],
        active: 0,
        terms: n,
    };
    for t in 0..n {
        let term = margin - pos[t] + neg[t];
        if term > T::zero() {
            h.value += term;
            h.pos_grad[t] = -T::one();
            h.neg_grad[t] = T::one();
            h.active += 1;
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    /// `d loss / d word_logps` per pair.
    pub grads: BTreeMap<Pair, Vec<T>>,
    pub active_hinges: usize,
    pub hinge_terms: usize,
}

impl<T: Real> LossOutput<T> {
    fn new() -> Self {
        LossOutput { loss: T::zero(), grads: BTreeMap::new(), active_hinges: 0, hinge_terms: 0 }
    }

    fn grad_mut(&mut self, table: &PairScoreTable<T>, pair: Pair) -> Result<&mut Vec<T>> {
        let n = table.get(pair)?.word_logps.len();
        Ok(self.grads.entry(pair).or_insert_with(|| vec![T::zero(); n]))
    }

    fn add_nll(&mut self, table: &PairScoreTable<T>, pair: Pair) -> Result<()> {
        let lp = table.get(pair)?.logp;
        self.loss += -lp;
        self.grad_mut(table, pair)?.iter_mut().for_each(|g| *g -= T::one());
        Ok(())
    }
}

/// `sum_neg [ -logp(pos) + weight * hinge(pos, neg) ]`, accumulated in the
/// order of `negatives`. Shared by every margin objective so that
/// equivalent configurations produce identical floating-point results.
fn margin_sum<T: Real>(
    out: &mut LossOutput<T>,
    table: &PairScoreTable<T>,
    pos: Pair,
    negatives: &[Pair],
    weight: T,
    margin: T,
) -> Result<()> {
    let p = table.get(pos)?.clone();
    for &neg in negatives {
        let n = table.get(neg)?;
        let h = hinge_word_margin(&p.word_logps, &n.word_logps, margin)?;
        out.loss += -p.logp + weight * h.value;
        out.active_hinges += h.active;
        out.hinge_terms += h.terms;
        let neg_grad: Vec<T> = h.neg_grad.iter().map(|&g| weight * g).collect();
        {
            let pg = out.grad_mut(table, pos)?;
            for (g, &hg) in pg.iter_mut().zip(&h.pos_grad) {
                *g += -T::one() + weight * hg;
            }
        }
        let ng = out.grad_mut(table, neg)?;
        for (g, d) in ng.iter_mut().zip(neg_grad) {
            *g += d;
        }
    }
    Ok(())
}

/// `-log p(S | target, I)`.
pub fn loss_max_likelihood<T: Real>(table: &PairScoreTable<T>, target: RegionId) -> Result<LossOutput<T>> {
    let mut out = LossOutput::new();
    out.add_nll(table, (target, RegionId::IMAGE))?;
    Ok(out)
}

/// Likelihood plus word-level margin against each negative region, all
/// paired with the image.
pub fn loss_max_margin<T: Real>(
    table: &PairScoreTable<T>,
    target: RegionId,
    negatives: &[RegionId],
    cfg: &TrainConfig,
) -> Result<LossOutput<T>> {
    let pos = (target, RegionId::IMAGE);
    table.get(pos)?;
    let neg_pairs: Vec<Pair> = negatives.iter().map(|&n| (n, RegionId::IMAGE)).collect();
    let mut out = LossOutput::new();
    margin_sum(&mut out, table, pos, &neg_pairs, T::lit(cfg.lambda), T::lit(cfg.margin))?;
    Ok(out)
}

/// Best context of `target` by sentence log-probability; ties go to the
/// lowest context id.
pub fn pool_positive_logprob<T: Real>(
    table: &PairScoreTable<T>,
    target: RegionId,
    contexts: &[RegionId],
) -> Result<(T, RegionId)> {
    let mut sorted = contexts.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(T, RegionId)> = None;
    for c in sorted {
        let lp = table.get((target, c))?.logp;
        if best.is_none_or(|(b, _)| lp > b) {
            best = Some((lp, c));
        }
    }
    best.ok_or(Error::Empty("contexts"))
}

/// Latent positive context: the argmax of `p(S | target, ctx)`.
pub fn select_latent_positive<T: Real>(table: &PairScoreTable<T>, target: RegionId, contexts: &[RegionId]) -> Result<RegionId> {
    pool_positive_logprob(table, target, contexts).map(|(_, c)| c)
}

/// Margin between the max-pooled positive bag and every negative pair of
/// `bag`. Only the maximizing positive pair receives gradient.
pub fn loss_mil_neg<T: Real>(table: &PairScoreTable<T>, bag: &Bag, cfg: &TrainConfig) -> Result<LossOutput<T>> {
    let (_, best) = pool_positive_logprob(table, bag.target, &bag.contexts())?;
    let pos = (bag.target, best);
    let mut out = LossOutput::new();
    if bag.negative_pairs.is_empty() {
        log::debug!("empty negative sample for {}; using the pooled positive alone", bag.target);
        out.add_nll(table, pos)?;
        return Ok(out);
    }
    margin_sum(&mut out, table, pos, &bag.negative_pairs, T::lit(cfg.lambda_neg), T::lit(cfg.margin))?;
    Ok(out)
}

/// Negative-bag margin around `(target, latent)` plus margins against the
/// other pairs of the positive bag.
pub fn loss_mil_posneg<T: Real>(
    table: &PairScoreTable<T>,
    bag: &Bag,
    latent: RegionId,
    cfg: &TrainConfig,
) -> Result<LossOutput<T>> {
    let contexts = bag.contexts();
    if !contexts.contains(&latent) {
        return Err(Error::MissingScore(bag.target, latent));
    }
    let pos = (bag.target, latent);
    let margin = T::lit(cfg.margin);
    let mut out = LossOutput::new();
    margin_sum(&mut out, table, pos, &bag.negative_pairs, T::lit(cfg.lambda_neg), margin)?;
    let others: Vec<Pair> = bag.positive_pairs.iter().copied().filter(|&p| p != pos).collect();
    margin_sum(&mut out, table, pos, &others, T::lit(cfg.lambda_pos), margin)?;
    if bag.negative_pairs.is_empty() && others.is_empty() {
        out.add_nll(table, pos)?;
    }
    Ok(out)
}
