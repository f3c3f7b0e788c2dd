//! Scenes, regions, candidate sets and referring expressions.
//!
//! A scene is an image with a list of region proposals and the expressions
//! annotated on it. Comprehension works over a [`CandidateSet`]: the proposals
//! plus one extra region spanning the whole image, which is what lets the
//! image act as a context region just like any proposal.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(pub u32);

impl RegionId {
    /// Reserved id of the full-image sentinel. Lower than every proposal id,
    /// so lowest-id tie breaking prefers the image.
    pub const IMAGE: RegionId = RegionId(0);

    pub fn is_image(self) -> bool {
        self == Self::IMAGE
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_image() {
            write!(f, "I")
        } else {
            write!(f, "R{}", self.0)
        }
    }
}

/// Accepts `I`, `R3` or a bare `3`.
impl std::str::FromStr for RegionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t == "I" {
            return Ok(RegionId::IMAGE);
        }
        let digits = t.strip_prefix('R').unwrap_or(t);
        digits.parse().map(RegionId).map_err(|_| Error::Config(format!("bad region id {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
}

impl ImageMeta {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        let im = ImageMeta { width, height };
        im.validate()?;
        Ok(im)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) || !self.width.is_finite() || !self.height.is_finite() {
            return Err(Error::InvalidImage(self.width, self.height));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width, self.height)
    }
}

/// Axis-aligned box `(xmin, ymin, xmax, ymax)` in pixels, y pointing down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox<T = f64> {
    pub xmin: T,
    pub ymin: T,
    pub xmax: T,
    pub ymax: T,
}

impl<T: Real> BBox<T> {
    pub fn new(xmin: T, ymin: T, xmax: T, ymax: T) -> Self {
        BBox { xmin, ymin, xmax, ymax }
    }

    pub fn from_array(a: [T; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn width(&self) -> T {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> T {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.xmin < self.xmax && self.ymin < self.ymax)
    }

    pub fn centroid(&self) -> (T, T) {
        let two = T::lit(2.0);
        ((self.xmin + self.xmax) / two, (self.ymin + self.ymax) / two)
    }

    /// Area of the overlap with `other`, zero when disjoint or touching.
    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    pub fn cast<U: Real>(self) -> BBox<U> {
        BBox::new(
            U::lit(self.xmin.as_f64()),
            U::lit(self.ymin.as_f64()),
            U::lit(self.xmax.as_f64()),
            U::lit(self.ymax.as_f64()),
        )
    }
}

impl BBox<f64> {
    fn check_in(&self, im: &ImageMeta) -> Result<()> {
        let arr = self.to_array();
        if arr.iter().any(|v| !v.is_finite()) || self.is_degenerate() {
            return Err(Error::DegenerateBox(arr));
        }
        if self.xmin < 0.0 || self.ymin < 0.0 || self.xmax > im.width || self.ymax > im.height {
            return Err(Error::OutOfBounds { bbox: arr, width: im.width, height: im.height });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: RegionId,
    pub bbox: BBox,
    pub category: String,
    pub appearance: Vec<f64>,
}

/// The image sentinel followed by the proposals, in their given order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub image: ImageMeta,
    pub image_region: Region,
    pub proposals: Vec<Region>,
}

/// Validates proposals and prepends the full-image sentinel region.
///
/// The sentinel's appearance is the mean of the proposals' appearance
/// vectors, standing in for a whole-image descriptor.
pub fn build_candidate_set(image: ImageMeta, proposals: Vec<Region>) -> Result<CandidateSet> {
    image.validate()?;
    if proposals.is_empty() {
        return Err(Error::EmptyProposals);
    }
    let dim = proposals[0].appearance.len();
    let mut seen = HashSet::new();
    for p in &proposals {
        p.bbox.check_in(&image)?;
        if p.id.is_image() || !seen.insert(p.id) {
            return Err(Error::BadRegionId(p.id));
        }
        if p.appearance.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: p.appearance.len() });
        }
    }
    let mut mean = vec![0.0; dim];
    for p in &proposals {
        for (m, a) in mean.iter_mut().zip(&p.appearance) {
            *m += a;
        }
    }
    let n = proposals.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let image_region = Region {
        id: RegionId::IMAGE,
        bbox: image.full_box(),
        category: "image".to_string(),
        appearance: mean,
    };
    Ok(CandidateSet { image, image_region, proposals })
}

impl CandidateSet {
    pub fn appearance_dim(&self) -> usize {
        self.image_region.appearance.len()
    }

    pub fn get(&self, id: RegionId) -> Option<&Region> {
        if id.is_image() {
            Some(&self.image_region)
        } else {
            self.proposals.iter().find(|r| r.id == id)
        }
    }

    pub fn region(&self, id: RegionId) -> Result<&Region> {
        self.get(id).ok_or(Error::RegionNotFound(id))
    }

    pub fn contains_proposal(&self, id: RegionId) -> bool {
        !id.is_image() && self.get(id).is_some()
    }

    /// Proposal ids in ascending order.
    pub fn proposal_ids(&self) -> Vec<RegionId> {
        let mut ids: Vec<RegionId> = self.proposals.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Every candidate id (image included) in ascending order.
    pub fn all_ids(&self) -> Vec<RegionId> {
        let mut ids = vec![RegionId::IMAGE];
        ids.extend(self.proposal_ids());
        ids
    }

    /// `C \ {id}` in ascending id order.
    pub fn contexts_for(&self, id: RegionId) -> Vec<RegionId> {
        self.all_ids().into_iter().filter(|&c| c != id).collect()
    }
}

/// An annotated expression as stored in a scene file. Tokens are words, not
/// vocabulary indices. `landmark` is diagnostic metadata from the synthetic
/// generator and is never read by training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionRecord {
    pub tokens: Vec<String>,
    pub target: RegionId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<RegionId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageMeta,
    pub regions: Vec<Region>,
    pub expressions: Vec<ExpressionRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRecord {
    id: RegionId,
    bbox: [f64; 4],
    category: String,
    appearance: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    image: ImageMeta,
    regions: Vec<RegionRecord>,
    expressions: Vec<ExpressionRecord>,
}

impl Scene {
    pub fn candidates(&self) -> Result<CandidateSet> {
        build_candidate_set(self.image, self.regions.clone())
    }

    pub fn to_json_line(&self) -> Result<String> {
        let rec = SceneRecord {
            image: self.image,
            regions: self
                .regions
                .iter()
                .map(|r| RegionRecord {
                    id: r.id,
                    bbox: r.bbox.to_array(),
                    category: r.category.clone(),
                    appearance: r.appearance.clone(),
                })
                .collect(),
            expressions: self.expressions.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: SceneRecord = serde_json::from_str(line)?;
        let scene = Scene {
            image: rec.image,
            regions: rec
                .regions
                .into_iter()
                .map(|r| Region { id: r.id, bbox: BBox::from_array(r.bbox), category: r.category, appearance: r.appearance })
                .collect(),
            expressions: rec.expressions,
        };
        let cands = scene.candidates()?;
        for e in &scene.expressions {
            if !cands.contains_proposal(e.target) {
                return Err(Error::RegionNotFound(e.target));
            }
        }
        Ok(scene)
    }
}

pub fn write_scenes<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        writeln!(out, "{}", s.to_json_line()?)?;
    }
    Ok(())
}

/// Reads a JSON Lines scene file; blank lines are skipped.
pub fn read_scenes<R: BufRead>(input: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(Scene::from_json_line(&line)?);
    }
    Ok(scenes)
}

pub fn load_scenes(path: &std::path::Path) -> Result<Vec<Scene>> {
    let f = std::fs::File::open(path)?;
    read_scenes(std::io::BufReader::new(f))
}

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Lowercases and drops length-1 tokens that are not alphanumeric.
pub fn normalize_token(tok: &str) -> Option<String> {
    let t = tok.trim().to_lowercase();
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (None, _) => None,
        (Some(c), None) if !c.is_alphanumeric() => None,
        _ => Some(t),
    }
}

/// Whitespace tokenizer with the same normalization the vocabulary uses.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_token).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRecord", into = "VocabRecord")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRecord {
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabRecord {
    fn from(v: Vocabulary) -> Self {
        VocabRecord { tokens: v.tokens }
    }
}

impl TryFrom<VocabRecord> for Vocabulary {
    type Error = String;

    fn try_from(rec: VocabRecord) -> std::result::Result<Self, String> {
        if rec.tokens.len() < 3 || rec.tokens[..3] != [BOS, EOS, UNK] {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let index: HashMap<String, usize> = rec.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != rec.tokens.len() {
            return Err("duplicate vocabulary token".into());
        }
        Ok(Vocabulary { tokens: rec.tokens, index })
    }
}

impl Vocabulary {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const UNK: usize = 2;

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Corpus words in index order, reserved tokens excluded.
    pub fn words(&self) -> &[String] {
        &self.tokens[3..]
    }

    pub fn encode(&self, words: &[String]) -> Result<RefExpression> {
        encode_expression(words, self)
    }

    /// Maps indices back to words, dropping the sentence markers.
    pub fn decode(&self, expr: &RefExpression) -> Vec<String> {
        expr.tokens
            .iter()
            .filter(|&&i| i != Self::BOS && i != Self::EOS)
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }
}

/// Builds a vocabulary of the words occurring at least `min_count` times.
/// Words are indexed in order of first occurrence after the three reserved
/// tokens.
pub fn build_vocabulary(corpus: &[Vec<String>], min_count: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in corpus {
        for word in sentence.iter().filter_map(|w| normalize_token(w)) {
            if word == BOS || word == EOS || word == UNK {
                continue;
            }
            let c = counts.entry(word.clone()).or_insert(0);
            if *c == 0 {
                order.push(word);
            }
            *c += 1;
        }
    }
    let mut tokens = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
    tokens.extend(order.into_iter().filter(|w| counts[w] >= min_count));
    let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(Vocabulary { tokens, index })
}

/// Vocabulary indices of a sentence, bracketed by begin and end markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefExpression {
    pub tokens: Vec<usize>,
    pub target: Option<RegionId>,
}

impl RefExpression {
    /// Number of predicted positions: every token after the begin marker.
    pub fn scored_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.len() < 3 {
            return Err(Error::EmptyExpression);
        }
        if let Some(&index) = self.tokens.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::TokenOutOfRange { index, size: vocab_size });
        }
        Ok(())
    }
}

pub fn encode_expression(words: &[String], vocab: &Vocabulary) -> Result<RefExpression> {
    let mut tokens = vec![Vocabulary::BOS];
    tokens.extend(
        words
            .iter()
            .filter_map(|w| normalize_token(w))
            .map(|w| vocab.index_of(&w).filter(|&i| i > Vocabulary::UNK).unwrap_or(Vocabulary::UNK)),
    );
    if tokens.len() == 1 {
        return Err(Error::EmptyExpression);
    }
    tokens.push(Vocabulary::EOS);
    Ok(RefExpression { tokens, target: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn region(id: u32, b: [f64; 4]) -> Region {
        Region { id: RegionId(id), bbox: BBox::from_array(b), category: "ball".into(), appearance: vec![1.0, 0.0] }
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn region_id_parse_round_trip() {
        for id in [RegionId::IMAGE, RegionId(3), RegionId(17)] {
            assert_eq!(id.to_string().parse::<RegionId>().unwrap(), id);
        }
        assert_eq!("4".parse::<RegionId>().unwrap(), RegionId(4));
        assert!("R".parse::<RegionId>().is_err());
        assert!("x2".parse::<RegionId>().is_err());
    }

    #[test]
    fn candidate_set_adds_image_sentinel() {
        let im = ImageMeta::new(100.0, 100.0).unwrap();
        let c = build_candidate_set(im, vec![region(1, [10.0, 10.0, 20.0, 20.0])]).unwrap();
        assert_eq!(c.all_ids().len(), 2);
        assert_eq!(c.image_region.bbox.to_array(), [0.0, 0.0, 100.0, 100.0]);
        assert_eq!(c.image_region.id, RegionId::IMAGE);
    }

    #[test]
    fn candidate_set_rejects_bad_input() {
        let im = ImageMeta::new(100.0, 100.0).unwrap();
        let err = build_candidate_set(im, vec![]).unwrap_err();
        assert_eq!(err.to_string(), "empty proposals");
        let err = build_candidate_set(im, vec![region(1, [50.0, 50.0, 50.0, 60.0])]).unwrap_err();
        assert!(err.to_string().starts_with("degenerate box"));
        assert!(matches!(
            build_candidate_set(im, vec![region(1, [50.0, 50.0, 101.0, 60.0])]),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(matches!(
            build_candidate_set(im, vec![region(0, [1.0, 1.0, 2.0, 2.0])]),
            Err(Error::BadRegionId(_))
        ));
        let dup = vec![region(3, [1.0, 1.0, 2.0, 2.0]), region(3, [5.0, 5.0, 9.0, 9.0])];
        assert!(matches!(build_candidate_set(im, dup), Err(Error::BadRegionId(_))));
    }

    #[test]
    fn vocabulary_counts_and_filters() {
        let v = build_vocabulary(&[words("a a a"), words("a b")], 2).unwrap();
        assert_eq!(v.words(), ["a".to_string()]);
        assert_eq!(v.len(), 4);

        let v = build_vocabulary(&[words("x")], 1).unwrap();
        assert_eq!(v.words(), ["x".to_string()]);

        let v = build_vocabulary(&[words("a ! a")], 1).unwrap();
        assert_eq!(v.words(), ["a".to_string()]);
        assert!(v.index_of("!").is_none());

        assert!(matches!(build_vocabulary(&[], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocabulary_orders_by_first_occurrence() {
        let v = build_vocabulary(&[words("zeta alpha"), words("alpha zeta mid")], 1).unwrap();
        assert_eq!(v.words(), ["zeta", "alpha", "mid"].map(String::from));
    }

    #[test]
    fn reserved_strings_in_corpus_do_not_collide() {
        let v = build_vocabulary(&[words("<bos> red <unk>")], 1).unwrap();
        assert_eq!(v.words(), ["red".to_string()]);
    }

    #[test]
    fn encode_brackets_and_maps_oov() {
        let v = build_vocabulary(&[words("red ball")], 1).unwrap();
        let e = encode_expression(&words("red ball"), &v).unwrap();
        assert_eq!(e.tokens, vec![Vocabulary::BOS, 3, 4, Vocabulary::EOS]);
        let e = encode_expression(&words("zzz"), &v).unwrap();
        assert_eq!(e.tokens, vec![Vocabulary::BOS, Vocabulary::UNK, Vocabulary::EOS]);
        assert!(matches!(encode_expression(&[], &v), Err(Error::EmptyExpression)));
    }

    #[test]
    fn scene_json_field_order() {
        let s = Scene {
            image: ImageMeta::new(64.0, 32.0).unwrap(),
            regions: vec![Region {
                id: RegionId(1),
                bbox: BBox::new(1.0, 2.0, 3.5, 4.0),
                category: "box".into(),
                appearance: vec![0.1, 0.2],
            }],
            expressions: vec![ExpressionRecord { tokens: words("red box"), target: RegionId(1), landmark: None }],
        };
        let line = s.to_json_line().unwrap();
        assert_eq!(
            line,
            r#"{"image":{"w":64.0,"h":32.0},"regions":[{"id":1,"bbox":[1.0,2.0,3.5,4.0],"category":"box","appearance":[0.1,0.2]}],"expressions":[{"tokens":["red","box"],"target":1}]}"#
        );
        assert_eq!(Scene::from_json_line(&line).unwrap(), s);
    }

    #[test]
    fn scene_rejects_unknown_target() {
        let line = r#"{"image":{"w":10,"h":10},"regions":[{"id":1,"bbox":[1,1,2,2],"category":"a","appearance":[]}],"expressions":[{"tokens":["a"],"target":7}]}"#;
        assert!(matches!(Scene::from_json_line(line), Err(Error::RegionNotFound(RegionId(7)))));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(idx in proptest::collection::vec(0usize..5, 1..8)) {
            let pool = ["red", "ball", "left", "of", "blue"];
            let v = build_vocabulary(&[pool.iter().map(|s| s.to_string()).collect()], 1).unwrap();
            let ws: Vec<String> = idx.iter().map(|&i| pool[i].to_string()).collect();
            let e = encode_expression(&ws, &v).unwrap();
            prop_assert_eq!(v.decode(&e), ws);
        }

        #[test]
        fn proposals_preserved(n in 1usize..8) {
            let im = ImageMeta::new(200.0, 200.0).unwrap();
            let props: Vec<Region> = (0..n)
                .map(|i| region(n as u32 - i as u32, [i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0]))
                .collect();
            let c = build_candidate_set(im, props.clone()).unwrap();
            prop_assert_eq!(c.proposals, props);
        }
    }
}
