//! Numeric input for the sequence model.
//!
//! A region is described by its appearance vector followed by five
//! box-geometry values. Both blocks are min-max scaled into `[-0.5, 0.5]` with
//! factors taken from the training set, and a (region, context) pair is the
//! region block followed by the context block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::scene::{CandidateSet, ImageMeta, Region, RegionId};

pub const BBOX_FEATURES: usize = 5;

/// `[xmin/W, ymin/H, xmax/W, ymax/H, area/image_area]`.
pub fn bbox_features<T: Real>(r: &Region, im: &ImageMeta) -> Result<[T; BBOX_FEATURES]> {
    im.validate()?;
    let b = r.bbox.cast::<T>();
    if b.is_degenerate() {
        return Err(Error::DegenerateBox(r.bbox.to_array()));
    }
    let w = T::lit(im.width);
    let h = T::lit(im.height);
    Ok([b.xmin / w, b.ymin / h, b.xmax / w, b.ymax / h, b.area() / (w * h)])
}

/// Unscaled per-region block: appearance followed by box features.
pub fn region_block<T: Real>(r: &Region, im: &ImageMeta) -> Result<Vec<T>> {
    let mut v: Vec<T> = r.appearance.iter().map(|&a| T::lit(a)).collect();
    v.extend_from_slice(&bbox_features::<T>(r, im)?);
    Ok(v)
}

/// Per-dimension range observed on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaler<T = f64> {
    pub min: Vec<T>,
    pub max: Vec<T>,
}

pub fn fit_scaler<T, I, V>(vectors: I) -> Result<Scaler<T>>
where
    T: Real,
    I: IntoIterator<Item = V>,
    V: AsRef<[T]>,
{
    let mut it = vectors.into_iter();
    let first = it.next().ok_or(Error::Empty("scaler input"))?;
    let first = first.as_ref();
    let mut s = Scaler { min: first.to_vec(), max: first.to_vec() };
    for v in it {
        let v = v.as_ref();
        if v.len() != s.min.len() {
            return Err(Error::DimensionMismatch { expected: s.min.len(), got: v.len() });
        }
        for (i, &x) in v.iter().enumerate() {
            s.min[i] = s.min[i].min(x);
            s.max[i] = s.max[i].max(x);
        }
    }
    Ok(s)
}

impl<T: Real> Scaler<T> {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// `(x - min) / (max - min) - 0.5`, clamped to `[-0.5, 0.5]`; constant
    /// dimensions map to zero.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let half = T::lit(0.5);
        Ok(x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                let range = hi - lo;
                if range > T::zero() {
                    ((v - lo) / range - half).max(-half).min(half)
                } else {
                    T::zero()
                }
            })
            .collect())
    }

    pub fn cast<U: Real>(&self) -> Scaler<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        Scaler { min: c(&self.min), max: c(&self.max) }
    }
}

pub fn apply_scaler<T: Real>(x: &[T], s: &Scaler<T>) -> Result<Vec<T>> {
    s.apply(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures<T = f64>(pub Vec<T>);

impl<T> PairFeatures<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

pub fn pair_dim(appearance_dim: usize) -> usize {
    2 * (appearance_dim + BBOX_FEATURES)
}

pub fn pair_features<T: Real>(r: &Region, ctx: &Region, im: &ImageMeta, s: &Scaler<T>) -> Result<PairFeatures<T>> {
    let mut v = s.apply(&region_block(r, im)?)?;
    v.extend(s.apply(&region_block(ctx, im)?)?);
    Ok(PairFeatures(v))
}

/// Scaled blocks for every region of a candidate set, so pair features can be
/// assembled without recomputing them.
#[derive(Clone, Debug)]
pub struct CandidateFeatures<T = f64> {
    blocks: BTreeMap<RegionId, Vec<T>>,
}

impl<T: Real> CandidateFeatures<T> {
    pub fn new(cands: &CandidateSet, s: &Scaler<T>) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        blocks.insert(RegionId::IMAGE, s.apply(&region_block(&cands.image_region, &cands.image)?)?);
        for p in &cands.proposals {
            blocks.insert(p.id, s.apply(&region_block(p, &cands.image)?)?);
        }
        Ok(CandidateFeatures { blocks })
    }

    pub fn pair(&self, region: RegionId, ctx: RegionId) -> Result<PairFeatures<T>> {
        let a = self.blocks.get(&region).ok_or(Error::RegionNotFound(region))?;
        let b = self.blocks.get(&ctx).ok_or(Error::RegionNotFound(ctx))?;
        let mut v = Vec::with_capacity(a.len() + b.len());
        v.extend_from_slice(a);
        v.extend_from_slice(b);
        Ok(PairFeatures(v))
    }
}
