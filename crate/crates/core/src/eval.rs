//! IoU, Precision@1 and context-grounding accuracy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comprehension::{comprehend, PoolMode};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::scene::{BBox, RegionId, Scene};
use crate::seqnet::ModelParams;

/// A prediction counts when its IoU with the ground truth is strictly above
/// this value.
pub const IOU_THRESHOLD: f64 = 0.5;

pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    for x in [a, b] {
        if x.is_degenerate() {
            return Err(Error::DegenerateBox(x.cast::<f64>().to_array()));
        }
    }
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision_at_1: f64,
    pub n: usize,
    pub context_accuracy: Option<f64>,
    pub mode: String,
}

/// Fraction of `(predicted, ground truth)` pairs with IoU > 0.5.
pub fn precision_at_1<T: Real>(predictions: &[(BBox<T>, BBox<T>)]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let threshold = T::lit(IOU_THRESHOLD);
    let mut hits = 0usize;
    for (p, g) in predictions {
        if iou(p, g)? > threshold {
            hits += 1;
        }
    }
    Ok(EvalReport {
        precision_at_1: hits as f64 / predictions.len() as f64,
        n: predictions.len(),
        context_accuracy: None,
        mode: String::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextOutcome {
    /// Ground-truth landmark; `None` for non-relational expressions.
    pub landmark: Option<RegionId>,
    pub supporting: RegionId,
}

/// Share of relational expressions whose supporting context is the
/// annotated landmark. `None` when there are no relational expressions.
pub fn context_accuracy(outcomes: &[ContextOutcome]) -> Option<f64> {
    let relational: Vec<_> = outcomes.iter().filter_map(|o| o.landmark.map(|l| l == o.supporting)).collect();
    if relational.is_empty() {
        return None;
    }
    Some(relational.iter().filter(|&&ok| ok).count() as f64 / relational.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionOutcome {
    pub scene: usize,
    pub expression: usize,
    pub referred: RegionId,
    pub supporting: RegionId,
    pub target: RegionId,
    pub landmark: Option<RegionId>,
    pub iou: f64,
}

/// Runs comprehension on every expression of `scenes`. Work is spread over
/// `threads` workers; results are assembled in input order, so the output
/// does not depend on the thread count.
pub fn comprehend_dataset<T: Real>(
    params: &ModelParams<T>,
    scenes: &[Scene],
    mode: PoolMode,
    max_contexts: usize,
    threads: usize,
) -> Result<Vec<ExpressionOutcome>> {
    let jobs: Vec<(usize, usize)> =
        scenes.iter().enumerate().flat_map(|(s, sc)| (0..sc.expressions.len()).map(move |e| (s, e))).collect();
    let run = |&(s, e): &(usize, usize)| -> Result<ExpressionOutcome> {
        let scene = &scenes[s];
        let rec = &scene.expressions[e];
        let cands = scene.candidates()?;
        let expr = params.vocab.encode(&rec.tokens)?;
        let res = comprehend(params, &expr, &cands, mode, max_contexts)?;
        let pred = cands.region(res.referred)?.bbox;
        let gt = cands.region(rec.target)?.bbox;
        Ok(ExpressionOutcome {
            scene: s,
            expression: e,
            referred: res.referred,
            supporting: res.supporting_context,
            target: rec.target,
            landmark: rec.landmark,
            iou: iou(&pred, &gt)?,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| jobs.par_iter().map(run).collect())
}

/// Precision@1 and context accuracy of `mode` over a scene set.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    scenes: &[Scene],
    mode: PoolMode,
    max_contexts: usize,
    threads: usize,
) -> Result<EvalReport> {
    let outcomes = comprehend_dataset(params, scenes, mode, max_contexts, threads)?;
    report_from_outcomes(&outcomes, scenes, mode)
}

pub fn report_from_outcomes(outcomes: &[ExpressionOutcome], scenes: &[Scene], mode: PoolMode) -> Result<EvalReport> {
    let preds: Vec<(BBox, BBox)> = outcomes
        .iter()
        .map(|o| {
            let regions = &scenes[o.scene].regions;
            let find = |id: RegionId| regions.iter().find(|r| r.id == id).map(|r| r.bbox).ok_or(Error::RegionNotFound(id));
            Ok((find(o.referred)?, find(o.target)?))
        })
        .collect::<Result<_>>()?;
    let mut report = precision_at_1(&preds)?;
    let ctx: Vec<ContextOutcome> =
        outcomes.iter().map(|o| ContextOutcome { landmark: o.landmark, supporting: o.supporting }).collect();
    report.context_accuracy = if mode == PoolMode::ImageOnly { None } else { context_accuracy(&ctx) };
    report.mode = mode.name().to_string();
    Ok(report)
}
