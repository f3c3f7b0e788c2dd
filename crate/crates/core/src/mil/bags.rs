use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scene::{CandidateSet, RegionId};

/// `(region, context)`.
pub type Pair = (RegionId, RegionId);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bag {
    pub target: RegionId,
    pub positive_pairs: Vec<Pair>,
    pub negative_pairs: Vec<Pair>,
}

impl Bag {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid bag: {m}")));
        if self.positive_pairs.iter().any(|&(r, _)| r != self.target) {
            return bad("positive pair does not start with the target");
        }
        let all = self.positive_pairs.iter().chain(&self.negative_pairs);
        if all.clone().any(|(a, b)| a == b) {
            return bad("self pair");
        }
        if all.clone().any(|(a, _)| a.is_image()) {
            return bad("image as first element");
        }
        if self.negative_pairs.iter().any(|&(r, _)| r == self.target) {
            return bad("negative pair starts with the target");
        }
        Ok(())
    }

    /// Second elements of the positive pairs.
    pub fn contexts(&self) -> Vec<RegionId> {
        self.positive_pairs.iter().map(|&(_, c)| c).collect()
    }
}

/// Full bags for `target`: positives pair it with every other candidate
/// (the image included); negatives pair every other proposal with every
/// candidate except itself. Ordered by region id.
pub fn build_bags(cands: &CandidateSet, target: RegionId) -> Result<Bag> {
    if !cands.contains_proposal(target) {
        return Err(Error::RegionNotFound(target));
    }
    let positive_pairs = cands.contexts_for(target).into_iter().map(|c| (target, c)).collect();
    let negative_pairs = cands
        .proposal_ids()
        .into_iter()
        .filter(|&p| p != target)
        .flat_map(|p| cands.contexts_for(p).into_iter().map(move |c| (p, c)))
        .collect();
    Ok(Bag { target, positive_pairs, negative_pairs })
}

/// Up to `k` distractor proposals, preferring those sharing the target's
/// category and filling the remainder uniformly from the rest. Returned in
/// id order.
pub fn sample_hard_negatives<R: Rng>(cands: &CandidateSet, target: RegionId, k: usize, rng: &mut R) -> Result<Vec<RegionId>> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let tcat = &cands.region(target)?.category;
    let others: Vec<RegionId> = cands.proposal_ids().into_iter().filter(|&p| p != target).collect();
    let (same, rest): (Vec<RegionId>, Vec<RegionId>) =
        others.into_iter().partition(|&p| cands.get(p).map(|r| &r.category == tcat).unwrap_or(false));

    let mut out: Vec<RegionId> = if same.len() > k {
        sample(rng, same.len(), k).into_iter().map(|i| same[i]).collect()
    } else {
        same
    };
    let need = k - out.len();
    if need > 0 && !rest.is_empty() {
        let n = need.min(rest.len());
        out.extend(sample(rng, rest.len(), n).into_iter().map(|i| rest[i]));
    }
    out.sort_unstable();
    Ok(out)
}
