//! Test-time region selection.
//!
//! Every proposal is paired with the image and a capped set of other
//! proposals; pair probabilities are pooled per proposal with max or
//! noisy-or, and the best proposal is returned together with the context
//! that explains the expression best.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CandidateFeatures, PairFeatures};
use crate::mil::{PairScore, PairScoreTable};
use crate::num::Real;
use crate::scene::{BBox, CandidateSet, ImageMeta, RefExpression, Region, RegionId};
use crate::seqnet::{forward_logprob, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolMode {
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "noisy-or")]
    NoisyOr,
    #[serde(rename = "image-only")]
    ImageOnly,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Max => "max",
            PoolMode::NoisyOr => "noisy-or",
            PoolMode::ImageOnly => "image-only",
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PoolMode::Max, PoolMode::NoisyOr, PoolMode::ImageOnly]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling mode {s:?}")))
    }
}

/// Contexts scored for `region`: the image plus the lowest-id other
/// proposals, `max_contexts` in total at most.
pub fn test_contexts(cands: &CandidateSet, region: RegionId, max_contexts: usize) -> Vec<RegionId> {
    let mut ctx = vec![RegionId::IMAGE];
    ctx.extend(cands.proposal_ids().into_iter().filter(|&p| p != region).take(max_contexts.saturating_sub(1)));
    ctx
}

/// Scores every proposal against its test contexts, dropout off.
pub fn score_all_pairs<T: Real>(
    params: &ModelParams<T>,
    expr: &RefExpression,
    cands: &CandidateSet,
    max_contexts: usize,
) -> Result<PairScoreTable<T>> {
    if max_contexts == 0 {
        return Err(Error::Config("max_contexts must be >= 1".into()));
    }
    let feats = CandidateFeatures::new(cands, &params.scaler)?;
    let mut table = PairScoreTable::new();
    for r in cands.proposal_ids() {
        for c in test_contexts(cands, r, max_contexts) {
            let tr = forward_logprob(&params.config, &params.weights, expr, &feats.pair(r, c)?, None)?;
            table.insert((r, c), PairScore { logp: tr.logp, word_logps: tr.word_logps })?;
        }
    }
    Ok(table)
}

fn pair_probs<T: Real>(table: &PairScoreTable<T>, region: RegionId) -> Result<Vec<(RegionId, T)>> {
    let ctx = table.contexts_of(region);
    if ctx.is_empty() {
        return Err(Error::Empty("scored pairs for region"));
    }
    ctx.into_iter().map(|c| Ok((c, table.get((region, c))?.logp.exp()))).collect()
}

/// `1 - prod(1 - p_i)`, accumulated as a sum of `ln(1 - p_i)`. Never below
/// the largest factor, which rounding alone could otherwise undercut by an ulp.
pub fn noisy_or<T: Real>(probs: &[T]) -> T {
    let s: T = probs.iter().map(|&p| (-p).ln_1p()).sum();
    let largest = probs.iter().copied().fold(T::zero(), T::max);
    (-s.exp_m1()).max(largest)
}

pub fn pool_max<T: Real>(table: &PairScoreTable<T>, region: RegionId) -> Result<T> {
    Ok(pair_probs(table, region)?.into_iter().map(|(_, p)| p).fold(T::zero(), T::max))
}

pub fn pool_noisy_or<T: Real>(table: &PairScoreTable<T>, region: RegionId) -> Result<T> {
    let p: Vec<T> = pair_probs(table, region)?.into_iter().map(|(_, p)| p).collect();
    Ok(noisy_or(&p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComprehensionResult<T> {
    pub referred: RegionId,
    pub supporting_context: RegionId,
    /// Pooled probability per proposal, ascending id.
    pub pooled: Vec<(RegionId, T)>,
    pub table: PairScoreTable<T>,
}

pub fn comprehend<T: Real>(
    params: &ModelParams<T>,
    expr: &RefExpression,
    cands: &CandidateSet,
    mode: PoolMode,
    max_contexts: usize,
) -> Result<ComprehensionResult<T>> {
    if cands.proposals.is_empty() {
        return Err(Error::EmptyProposals);
    }
    let cap = if mode == PoolMode::ImageOnly { 1 } else { max_contexts };
    let table = score_all_pairs(params, expr, cands, cap)?;
    let pooled = cands
        .proposal_ids()
        .into_iter()
        .map(|r| {
            let p = match mode {
                PoolMode::NoisyOr => pool_noisy_or(&table, r)?,
                PoolMode::Max | PoolMode::ImageOnly => pool_max(&table, r)?,
            };
            Ok((r, p))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = pooled[0];
    for &(r, p) in &pooled[1..] {
        if p > best.1 {
            best = (r, p);
        }
    }
    let referred = best.0;
    let supporting_context = if mode == PoolMode::ImageOnly {
        RegionId::IMAGE
    } else {
        crate::mil::select_latent_positive(&table, referred, &table.contexts_of(referred))?
    };
    Ok(ComprehensionResult { referred, supporting_context, pooled, table })
}

/// Expression probability of a query box slid over the image, with the
/// context region held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    pub width: f64,
    pub height: f64,
    pub stride: f64,
    pub box_width: f64,
    pub box_height: f64,
    /// `values[row][col]`; the query box of cell `(row, col)` starts at
    /// `(col * stride, row * stride)`.
    pub values: Vec<Vec<T>>,
}

impl<T: Real> Heatmap<T> {
    pub fn cols(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    /// Header `# w h stride bw bh`, then one space-separated row per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {} {} {} {} {}\n", self.width, self.height, self.stride, self.box_width, self.box_height);
        for row in &self.values {
            let line: Vec<String> = row.iter().map(|v| format!("{:e}", v.as_f64())).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// Number of stride positions of a box of size `b` along an extent `w`.
pub fn grid_len(w: f64, b: f64, stride: f64) -> usize {
    ((w - b) / stride).floor() as usize + 1
}

/// Slides a `box_size` query box on a `stride` grid. The query carries
/// `appearance` (a category mean, say) or zeros when none is given.
pub fn heatmap<T: Real>(
    params: &ModelParams<T>,
    expr: &RefExpression,
    context: &Region,
    box_size: (f64, f64),
    stride: f64,
    im: &ImageMeta,
    appearance: Option<&[f64]>,
) -> Result<Heatmap<T>> {
    im.validate()?;
    let (bw, bh) = box_size;
    if !(stride.is_finite() && stride > 0.0 && bw.is_finite() && bw > 0.0 && bh.is_finite() && bh > 0.0) {
        return Err(Error::Config("stride and box size must be positive".into()));
    }
    if bw > im.width || bh > im.height {
        return Err(Error::Config(format!("query box {bw}x{bh} larger than image {}x{}", im.width, im.height)));
    }
    let adim = params.appearance_dim();
    let appearance = match appearance {
        Some(a) if a.len() != adim => return Err(Error::DimensionMismatch { expected: adim, got: a.len() }),
        Some(a) => a.to_vec(),
        None => vec![0.0; adim],
    };
    let ctx_block = params.scaler.apply(&crate::features::region_block(context, im)?)?;
    let (cols, rows) = (grid_len(im.width, bw, stride), grid_len(im.height, bh, stride));
    let mut values = Vec::with_capacity(rows);
    for row in 0..rows {
        let mut line = Vec::with_capacity(cols);
        for col in 0..cols {
            let (x0, y0) = (col as f64 * stride, row as f64 * stride);
            let query = Region {
                id: RegionId(u32::MAX),
                bbox: BBox::new(x0, y0, x0 + bw, y0 + bh),
                category: "query".into(),
                appearance: appearance.clone(),
            };
            let mut feat = params.scaler.apply(&crate::features::region_block(&query, im)?)?;
            feat.extend_from_slice(&ctx_block);
            let tr = forward_logprob(&params.config, &params.weights, expr, &PairFeatures(feat), None)?;
            line.push(tr.logp.exp());
        }
        values.push(line);
    }
    Ok(Heatmap { width: im.width, height: im.height, stride, box_width: bw, box_height: bh, values })
}
