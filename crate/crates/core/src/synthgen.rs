//! Synthetic relational scenes with ground-truth referring expressions.
//!
//! Each scene is a set of non-overlapping coloured objects. Expressions are
//! instantiated from two templates, `<color> <category>` and
//! `<category> <relation> <color> <category>`, and only kept when they pick
//! out exactly one target (and, for relational ones, one landmark).

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{write_scenes, BBox, ExpressionRecord, ImageMeta, Region, RegionId, Scene};

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Centroid comparison with a separation margin of 5% of the image
    /// extent along the compared axis.
    pub fn holds(self, a: &BBox, b: &BBox, im: &ImageMeta) -> bool {
        let (ax, ay) = a.centroid();
        let (bx, by) = b.centroid();
        let mx = 0.05 * im.width;
        let my = 0.05 * im.height;
        match self {
            Relation::LeftOf => ax + mx < bx,
            Relation::RightOf => ax > bx + mx,
            Relation::Above => ay + my < by,
            Relation::Below => ay > by + my,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub scenes: usize,
    /// Inclusive `[min, max]` object count.
    pub objects_per_scene: [usize; 2],
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub relation_set: Vec<Relation>,
    pub appearance_noise_sigma: f64,
    pub image_size: [f64; 2],
    /// Object side length as a fraction of the image side, `[min, max]`.
    pub box_fraction: [f64; 2],
    pub val_fraction: f64,
    /// Keep at most this many expressions per scene (sampled uniformly).
    pub max_expressions_per_scene: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            scenes: 100,
            objects_per_scene: [3, 5],
            categories: ["ball", "box", "plant"].map(String::from).to_vec(),
            colors: ["red", "blue", "green"].map(String::from).to_vec(),
            relation_set: Relation::ALL.to_vec(),
            appearance_noise_sigma: 0.1,
            image_size: [64.0, 64.0],
            box_fraction: [0.1, 0.2],
            val_fraction: 0.2,
            max_expressions_per_scene: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let [lo, hi] = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return bad("objects_per_scene must satisfy 1 <= min <= max");
        }
        if !self.relation_set.is_empty() && lo < 2 {
            return bad("relational templates need at least 2 objects per scene");
        }
        if self.categories.is_empty() || self.colors.is_empty() {
            return bad("need at least one category and one color");
        }
        if self.appearance_noise_sigma < 0.0 || !self.appearance_noise_sigma.is_finite() {
            return bad("appearance_noise_sigma must be finite and >= 0");
        }
        ImageMeta::new(self.image_size[0], self.image_size[1])?;
        let [fmin, fmax] = self.box_fraction;
        if !(fmin > 0.0 && fmin <= fmax && fmax <= 1.0) {
            return bad("box_fraction must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn appearance_dim(&self) -> usize {
        self.colors.len() + self.categories.len()
    }

    pub fn val_scenes(&self) -> usize {
        (self.scenes as f64 * self.val_fraction).round() as usize
    }

    pub fn train_scenes(&self) -> usize {
        self.scenes - self.val_scenes()
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// A generated scene plus the object colours the expression templates need.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub scene: Scene,
    pub colors: Vec<String>,
}

/// Places objects and draws their appearance. Expressions are left empty.
pub fn gen_scene(config: &SynthConfig, index: usize) -> Result<SynthScene> {
    config.validate()?;
    if index >= config.scenes {
        return Err(Error::Config(format!("scene index {index} >= {}", config.scenes)));
    }
    let mut rng = config.rng_for(index);
    let im = ImageMeta::new(config.image_size[0], config.image_size[1])?;
    let [lo, hi] = config.objects_per_scene;
    let n = rng.gen_range(lo..=hi);
    let noise = Normal::new(0.0, config.appearance_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let [fmin, fmax] = config.box_fraction;

    let mut regions: Vec<Region> = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut attempts = 0;
    while regions.len() < n {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS * n {
            return Err(Error::Placement(attempts - 1));
        }
        let w = rng.gen_range(fmin..=fmax) * im.width;
        let h = rng.gen_range(fmin..=fmax) * im.height;
        let x0 = rng.gen_range(0.0..=(im.width - w));
        let y0 = rng.gen_range(0.0..=(im.height - h));
        let bbox = BBox::new(x0, y0, x0 + w, y0 + h);
        if regions.iter().any(|r| r.bbox.intersection_area(&bbox) > 0.0) {
            continue;
        }
        let color = rng.gen_range(0..config.colors.len());
        let category = rng.gen_range(0..config.categories.len());
        let mut appearance = vec![0.0; config.appearance_dim()];
        appearance[color] = 1.0;
        appearance[config.colors.len() + category] = 1.0;
        if config.appearance_noise_sigma > 0.0 {
            for a in appearance.iter_mut() {
                *a += noise.sample(&mut rng);
            }
        }
        regions.push(Region {
            id: RegionId(regions.len() as u32 + 1),
            bbox,
            category: config.categories[category].clone(),
            appearance,
        });
        colors.push(config.colors[color].clone());
    }
    Ok(SynthScene { scene: Scene { image: im, regions, expressions: Vec::new() }, colors })
}

/// Every unambiguous attribute and relational expression for the scene.
pub fn gen_expressions(synth: &SynthScene, config: &SynthConfig) -> Vec<ExpressionRecord> {
    let regions = &synth.scene.regions;
    let colors = &synth.colors;
    let im = &synth.scene.image;
    let mut out = Vec::new();

    for (i, r) in regions.iter().enumerate() {
        let same = (0..regions.len()).filter(|&j| colors[j] == colors[i] && regions[j].category == r.category).count();
        if same == 1 {
            out.push(ExpressionRecord {
                tokens: vec![colors[i].clone(), r.category.clone()],
                target: r.id,
                landmark: None,
            });
        }
    }

    for (t, target) in regions.iter().enumerate() {
        for (l, landmark) in regions.iter().enumerate() {
            if t == l {
                continue;
            }
            for &rel in &config.relation_set {
                if !rel.holds(&target.bbox, &landmark.bbox, im) {
                    continue;
                }
                if count_satisfiers(synth, rel, &target.category, &colors[l], &landmark.category) != 1 {
                    continue;
                }
                let mut tokens = vec![target.category.clone()];
                tokens.extend(rel.words().iter().map(|w| w.to_string()));
                tokens.push(colors[l].clone());
                tokens.push(landmark.category.clone());
                out.push(ExpressionRecord { tokens, target: target.id, landmark: Some(landmark.id) });
            }
        }
    }
    out
}

/// Number of ordered pairs `(a, b)` matching the relational template.
pub fn count_satisfiers(synth: &SynthScene, rel: Relation, category: &str, lm_color: &str, lm_category: &str) -> usize {
    let regions = &synth.scene.regions;
    let mut n = 0;
    for (a, ra) in regions.iter().enumerate() {
        for (b, rb) in regions.iter().enumerate() {
            if a != b
                && ra.category == category
                && synth.colors[b] == lm_color
                && rb.category == lm_category
                && rel.holds(&ra.bbox, &rb.bbox, &synth.scene.image)
            {
                n += 1;
            }
        }
    }
    n
}

/// Generates scene `index` with its expressions attached, applying the
/// per-scene expression cap.
pub fn gen_annotated_scene(config: &SynthConfig, index: usize) -> Result<Scene> {
    let synth = gen_scene(config, index)?;
    let mut expressions = gen_expressions(&synth, config);
    if let Some(cap) = config.max_expressions_per_scene {
        if expressions.len() > cap {
            // Separate stream so the cap does not perturb scene layout.
            let mut rng = config.rng_for(index);
            rng.set_stream((index as u64) | (1 << 63));
            let mut keep = sample(&mut rng, expressions.len(), cap).into_vec();
            keep.sort_unstable();
            expressions = keep.into_iter().map(|i| expressions[i].clone()).collect();
        }
    }
    let mut scene = synth.scene;
    scene.expressions = expressions;
    Ok(scene)
}

/// Train and validation scenes, split by scene index.
pub fn generate(config: &SynthConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    config.validate()?;
    let all = (0..config.scenes).map(|i| gen_annotated_scene(config, i)).collect::<Result<Vec<_>>>()?;
    let mut train = all;
    let val = train.split_off(config.train_scenes());
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub train_expressions: usize,
    pub val_expressions: usize,
}

/// Writes `train.jsonl` and `val.jsonl` into `dir`.
pub fn gen_dataset(config: &SynthConfig, dir: &Path) -> Result<DatasetSummary> {
    let (train, val) = generate(config)?;
    std::fs::create_dir_all(dir)?;
    for (name, scenes) in [("train.jsonl", &train), ("val.jsonl", &val)] {
        let f = std::fs::File::create(dir.join(name))?;
        let mut w = std::io::BufWriter::new(f);
        write_scenes(&mut w, scenes)?;
        std::io::Write::flush(&mut w)?;
    }
    let count = |s: &[Scene]| s.iter().map(|x| x.expressions.len()).sum();
    Ok(DatasetSummary {
        train_scenes: train.len(),
        val_scenes: val.len(),
        train_expressions: count(&train),
        val_expressions: count(&val),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig { scenes: 20, objects_per_scene: [4, 4], ..Default::default() }
    }

    fn hand_scene(objs: &[(&str, &str, [f64; 4])]) -> SynthScene {
        let regions = objs
            .iter()
            .enumerate()
            .map(|(i, (_, cat, b))| Region {
                id: RegionId(i as u32 + 1),
                bbox: BBox::from_array(*b),
                category: cat.to_string(),
                appearance: vec![],
            })
            .collect();
        SynthScene {
            scene: Scene { image: ImageMeta::new(100.0, 100.0).unwrap(), regions, expressions: vec![] },
            colors: objs.iter().map(|(c, _, _)| c.to_string()).collect(),
        }
    }

    fn text(e: &ExpressionRecord) -> String {
        e.tokens.join(" ")
    }

    #[test]
    fn deterministic_per_index() {
        let c = cfg();
        assert_eq!(gen_scene(&c, 3).unwrap(), gen_scene(&c, 3).unwrap());
        assert_ne!(gen_scene(&c, 3).unwrap(), gen_scene(&c, 4).unwrap());
    }

    #[test]
    fn zero_noise_gives_one_hot() {
        let c = SynthConfig { appearance_noise_sigma: 0.0, ..cfg() };
        let s = gen_scene(&c, 0).unwrap();
        for (r, color) in s.scene.regions.iter().zip(&s.colors) {
            let ci = c.colors.iter().position(|x| x == color).unwrap();
            let ki = c.categories.iter().position(|x| *x == r.category).unwrap();
            let mut expect = vec![0.0; 6];
            expect[ci] = 1.0;
            expect[3 + ki] = 1.0;
            assert_eq!(r.appearance, expect);
        }
    }

    #[test]
    fn object_count_and_no_overlap() {
        let c = cfg();
        for i in 0..c.scenes {
            let s = gen_scene(&c, i).unwrap();
            assert_eq!(s.scene.regions.len(), 4);
            for a in &s.scene.regions {
                for b in &s.scene.regions {
                    if a.id != b.id {
                        assert_eq!(a.bbox.intersection_area(&b.bbox), 0.0);
                    }
                }
            }
            s.scene.candidates().unwrap();
        }
    }

    #[test]
    fn crowded_config_fails() {
        let c = SynthConfig { objects_per_scene: [40, 40], box_fraction: [0.4, 0.5], ..cfg() };
        assert!(matches!(gen_scene(&c, 0), Err(Error::Placement(_))));
    }

    #[test]
    fn side_by_side_balls() {
        let s = hand_scene(&[("red", "ball", [10.0, 40.0, 20.0, 50.0]), ("blue", "ball", [60.0, 40.0, 70.0, 50.0])]);
        let exprs = gen_expressions(&s, &SynthConfig::default());
        let rel = exprs.iter().find(|e| text(e) == "ball left of blue ball").expect("relational expression");
        assert_eq!(rel.target, RegionId(1));
        assert_eq!(rel.landmark, Some(RegionId(2)));
        assert!(exprs.iter().any(|e| text(e) == "red ball" && e.target == RegionId(1)));
        assert!(exprs.iter().any(|e| text(e) == "ball right of red ball" && e.target == RegionId(2)));
    }

    #[test]
    fn ambiguous_attribute_suppressed() {
        let s = hand_scene(&[("red", "ball", [10.0, 40.0, 20.0, 50.0]), ("red", "ball", [60.0, 40.0, 70.0, 50.0])]);
        let exprs = gen_expressions(&s, &SynthConfig::default());
        assert!(exprs.iter().all(|e| e.tokens.len() > 2));
    }

    #[test]
    fn single_object_only_attribute() {
        let s = hand_scene(&[("red", "ball", [10.0, 40.0, 20.0, 50.0])]);
        let exprs = gen_expressions(&s, &SynthConfig::default());
        assert_eq!(exprs.len(), 1);
        assert_eq!(text(&exprs[0]), "red ball");
    }

    #[test]
    fn near_ties_are_not_relations() {
        // centroids 3px apart on a 100px image: inside the 5px margin
        let s = hand_scene(&[("red", "ball", [10.0, 10.0, 20.0, 20.0]), ("blue", "box", [13.0, 60.0, 23.0, 70.0])]);
        let exprs = gen_expressions(&s, &SynthConfig::default());
        assert!(exprs.iter().all(|e| !e.tokens.contains(&"left".to_string()) && !e.tokens.contains(&"right".to_string())));
        assert!(exprs.iter().any(|e| text(e) == "ball above blue box"));
    }

    #[test]
    fn relational_expressions_verifiable() {
        let c = cfg();
        for i in 0..c.scenes {
            let s = gen_scene(&c, i).unwrap();
            for e in gen_expressions(&s, &c) {
                let Some(lm) = e.landmark else { continue };
                let rel = Relation::ALL
                    .into_iter()
                    .find(|r| e.tokens[1..e.tokens.len() - 2] == *r.words())
                    .unwrap();
                let t = s.scene.regions.iter().find(|r| r.id == e.target).unwrap();
                let l = s.scene.regions.iter().find(|r| r.id == lm).unwrap();
                assert!(rel.holds(&t.bbox, &l.bbox, &s.scene.image));
                let n = e.tokens.len();
                assert_eq!(count_satisfiers(&s, rel, &e.tokens[0], &e.tokens[n - 2], &e.tokens[n - 1]), 1);
            }
        }
    }

    #[test]
    fn split_and_cap() {
        let c = SynthConfig { scenes: 10, max_expressions_per_scene: Some(2), ..cfg() };
        let (train, val) = generate(&c).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert!(train.iter().chain(&val).all(|s| s.expressions.len() <= 2));
        let uncapped = generate(&SynthConfig { max_expressions_per_scene: None, ..c.clone() }).unwrap().0;
        assert_eq!(uncapped[0].regions, train[0].regions);
    }

    #[test]
    fn dataset_files_deterministic() {
        let c = SynthConfig { scenes: 10, ..cfg() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s = gen_dataset(&c, d1.path()).unwrap();
        assert_eq!((s.train_scenes, s.val_scenes), (8, 2));
        gen_dataset(&c, d2.path()).unwrap();
        for f in ["train.jsonl", "val.jsonl"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
        }
        let d3 = tempfile::tempdir().unwrap();
        gen_dataset(&SynthConfig { seed: 1, ..c }, d3.path()).unwrap();
        assert_ne!(std::fs::read(d1.path().join("train.jsonl")).unwrap(), std::fs::read(d3.path().join("train.jsonl")).unwrap());
    }
}
