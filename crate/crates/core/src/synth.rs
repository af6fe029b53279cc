//! Seeded synthetic scene graphs with a long-tailed predicate law, clustered
//! label embeddings and a controlled set of zero-shot test signatures.
//!
//! Every object label has a home predicate (`label % C_pred`). Label
//! embeddings sit close to their home predicate's embedding, a triple's
//! subject and object are both drawn from the predicate's home labels, and
//! the gold predicate of a pair is the home predicate of its subject.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::{IndexedMutRandom, IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_annotations, write_labels, write_token_vectors, EmbeddingTable};
use crate::metrics::RankedPrediction;
use crate::predict::{rank, write_predictions, ImagePredictions, ObjectPrediction, PairPrediction};
use crate::rng::{self, Rng};
use crate::types::{
    BoundingBox, Dataset, LabelKind, LabelSpace, LabelSpaces, ObjectInstance, SceneGraphAnnotation,
    Signature, Split, Triple,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub c_obj: usize,
    pub c_pred: usize,
    pub d_roi: usize,
    pub d_emb: usize,
    pub images: usize,
    pub zipf_s: f64,
    pub zero_shot_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Mean triples per image; actual counts are uniform in `[t/2, 3t/2]`.
    pub triples_per_image: usize,
    pub max_objects: usize,
    /// Probability that a triple endpoint reuses a compatible object already
    /// in the image.
    pub reuse: f64,
    /// Typical distance between predicate embeddings.
    pub predicate_spacing: f64,
    /// Distance of an object label embedding from its home predicate.
    pub label_offset: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            c_obj: 60,
            c_pred: 20,
            d_roi: 32,
            d_emb: 16,
            images: 2000,
            zipf_s: 1.5,
            zero_shot_fraction: 0.15,
            noise_sigma: 0.5,
            seed: 0,
            triples_per_image: 20,
            max_objects: 24,
            reuse: 0.5,
            predicate_spacing: 50.0,
            label_offset: 1.0,
            val_fraction: 0.1,
            test_fraction: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.c_obj == 0
            || self.c_pred == 0
            || self.d_roi == 0
            || self.d_emb == 0
            || self.images == 0
        {
            return fail("label counts, dimensions and image count must be at least 1".into());
        }
        if self.c_obj < self.c_pred {
            return fail(format!(
                "c_obj ({}) must be at least c_pred ({}) so every predicate has home labels",
                self.c_obj, self.c_pred
            ));
        }
        if !(0.0..1.0).contains(&self.zero_shot_fraction) {
            return fail(format!(
                "zero_shot_fraction {} must lie in [0, 1)",
                self.zero_shot_fraction
            ));
        }
        if !(self.zipf_s >= 0.0) || !(self.noise_sigma >= 0.0) {
            return fail("zipf_s and noise_sigma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.reuse) {
            return fail(format!("reuse {} must lie in [0, 1]", self.reuse));
        }
        if !(self.predicate_spacing > 0.0) || !(self.label_offset > 0.0) {
            return fail("predicate_spacing and label_offset must be positive".into());
        }
        if self.triples_per_image == 0 || self.max_objects < 2 {
            return fail("triples_per_image must be at least 1 and max_objects at least 2".into());
        }
        let f = self.val_fraction + self.test_fraction;
        if !(self.val_fraction >= 0.0 && self.test_fraction > 0.0 && f < 1.0) {
            return fail("split fractions must leave a non-empty train split".into());
        }
        Ok(())
    }
}

/// The planted rule behind the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeMap {
    /// Home predicate of each object label.
    pub home: Vec<usize>,
    /// Test signatures kept out of train.
    pub withheld: Vec<Signature>,
}

impl GenerativeMap {
    pub fn gold(&self, subj_label: usize, _obj_label: usize) -> usize {
        self.home[subj_label]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub objects: EmbeddingTable,
    pub predicates: EmbeddingTable,
    pub map: GenerativeMap,
}

fn gaussian_vector(rng: &mut Rng, d: usize, std: f64) -> Vec<f64> {
    (0..d)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_box(rng: &mut Rng, width: f64, height: f64) -> BoundingBox {
    let w = rng.random_range(0.05..0.5) * width;
    let h = rng.random_range(0.05..0.5) * height;
    let x1 = rng.random_range(0.0..width - w);
    let y1 = rng.random_range(0.0..height - h);
    BoundingBox::new(x1, y1, x1 + w, y1 + h)
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    home_labels: Vec<Vec<usize>>,
    anchors: Vec<Vec<f64>>,
    noise: Normal<f64>,
}

impl Generator<'_> {
    fn instance(
        &self,
        rng: &mut Rng,
        id: u32,
        label: usize,
        width: f64,
        height: f64,
    ) -> ObjectInstance {
        let bbox = random_box(rng, width, height);
        let feature = self.anchors[label]
            .iter()
            .map(|a| a + self.noise.sample(rng))
            .collect();
        ObjectInstance {
            object_id: id,
            label,
            bbox,
            feature,
        }
    }

    /// An object with a home label of `pred`, reused from the image when one
    /// exists and the reuse draw says so.
    fn endpoint(
        &self,
        rng: &mut Rng,
        objects: &mut Vec<ObjectInstance>,
        pred: usize,
        exclude: Option<u32>,
        width: f64,
        height: f64,
    ) -> u32 {
        let candidates: Vec<u32> = objects
            .iter()
            .filter(|o| o.label % self.cfg.c_pred == pred && Some(o.object_id) != exclude)
            .map(|o| o.object_id)
            .collect();
        let full = objects.len() >= self.cfg.max_objects;
        if !candidates.is_empty() && (full || rng.random::<f64>() < self.cfg.reuse) {
            return *candidates.choose(rng).expect("non-empty");
        }
        let label = *self.home_labels[pred]
            .choose(rng)
            .expect("every predicate has home labels");
        let id = objects.len() as u32;
        objects.push(self.instance(rng, id, label, width, height));
        id
    }

    fn image(
        &self,
        rng: &mut Rng,
        index: usize,
        preds: &WeightedIndex<f64>,
    ) -> SceneGraphAnnotation {
        let width = rng.random_range(400.0..1000.0_f64).round();
        let height = rng.random_range(300.0..800.0_f64).round();
        let t = self.cfg.triples_per_image;
        let count = rng.random_range(t.div_ceil(2)..=t + t / 2);
        let mut objects = Vec::new();
        let mut triples = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let p = preds.sample(rng);
            if objects.len() + 2 > self.cfg.max_objects
                && objects
                    .iter()
                    .filter(|o: &&ObjectInstance| o.label % self.cfg.c_pred == p)
                    .count()
                    < 2
            {
                continue;
            }
            let s = self.endpoint(rng, &mut objects, p, None, width, height);
            let o = self.endpoint(rng, &mut objects, p, Some(s), width, height);
            let triple = Triple {
                subj: s,
                pred: p,
                obj: o,
            };
            if seen.insert((s, o)) {
                triples.push(triple);
            }
        }
        SceneGraphAnnotation {
            image_id: format!("synth_{index:06}"),
            width,
            height,
            objects,
            triples,
        }
    }
}

fn label_spaces(cfg: &SynthConfig) -> LabelSpaces {
    let obj_width = (cfg.c_obj - 1).to_string().len();
    let pred_width = (cfg.c_pred - 1).to_string().len();
    LabelSpaces {
        object: LabelSpace::new(
            LabelKind::Object,
            (0..cfg.c_obj)
                .map(|i| format!("obj{i:0obj_width$}"))
                .collect(),
        )
        .expect("generated names are unique"),
        predicate: LabelSpace::new(
            LabelKind::Predicate,
            (0..cfg.c_pred)
                .map(|i| format!("rel{i:0pred_width$}"))
                .collect(),
        )
        .expect("generated names are unique"),
    }
}

fn signatures_of(annotations: &[SceneGraphAnnotation]) -> BTreeSet<Signature> {
    let mut out = BTreeSet::new();
    for a in annotations {
        for t in &a.triples {
            let (s, o) = (a.object(t.subj), a.object(t.obj));
            if let (Some(s), Some(o)) = (s, o) {
                out.insert(Signature::from((s.label, t.pred, o.label)));
            }
        }
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = rng::substream(cfg.seed, rng::SYNTH);
    let spaces = label_spaces(cfg);

    let pred_std = cfg.predicate_spacing / (2.0 * cfg.d_emb as f64).sqrt();
    let pred_vectors: Vec<Vec<f64>> = (0..cfg.c_pred)
        .map(|_| gaussian_vector(&mut rng, cfg.d_emb, pred_std))
        .collect();
    let home: Vec<usize> = (0..cfg.c_obj).map(|a| a % cfg.c_pred).collect();
    let offset_std = cfg.label_offset / (cfg.d_emb as f64).sqrt();
    let obj_vectors: Vec<Vec<f64>> = home
        .iter()
        .map(|&p| {
            let u = gaussian_vector(&mut rng, cfg.d_emb, offset_std);
            pred_vectors[p].iter().zip(u).map(|(a, b)| a + b).collect()
        })
        .collect();

    // Region anchors: a fixed random linear image of each label embedding,
    // scaled so entries are of order one.
    let map = gaussian_vector(
        &mut rng,
        cfg.d_roi * cfg.d_emb,
        1.0 / (cfg.d_emb as f64).sqrt(),
    );
    let scale = cfg.predicate_spacing;
    let anchors: Vec<Vec<f64>> = obj_vectors
        .iter()
        .map(|e| {
            (0..cfg.d_roi)
                .map(|r| {
                    (0..cfg.d_emb)
                        .map(|c| map[r * cfg.d_emb + c] * e[c])
                        .sum::<f64>()
                        / scale
                })
                .collect()
        })
        .collect();

    let mut home_labels = vec![Vec::new(); cfg.c_pred];
    for (a, &p) in home.iter().enumerate() {
        home_labels[p].push(a);
    }
    let generator = Generator {
        cfg,
        home_labels,
        anchors,
        noise: Normal::new(0.0, cfg.noise_sigma).expect("valid sigma"),
    };
    let zipf: Vec<f64> = (1..=cfg.c_pred)
        .map(|k| (k as f64).powf(-cfg.zipf_s))
        .collect();
    let preds = WeightedIndex::new(&zipf).expect("positive weights");

    let mut images: Vec<SceneGraphAnnotation> = (0..cfg.images)
        .map(|i| generator.image(&mut rng, i, &preds))
        .collect();
    images.shuffle(&mut rng);
    let n_test = ((cfg.images as f64 * cfg.test_fraction).round() as usize).clamp(1, cfg.images);
    let n_val = ((cfg.images as f64 * cfg.val_fraction).round() as usize).min(cfg.images - n_test);
    let mut test: Vec<_> = images.split_off(cfg.images - n_test);
    let val: Vec<_> = images.split_off(images.len() - n_val);
    let mut train = images;
    if train.is_empty() {
        return Err(Error::Config(
            "configuration leaves no training images".into(),
        ));
    }
    test.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    train.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut val = val;
    val.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    // Withhold exactly round(f · |test signatures|) signatures from train,
    // preferring those that are already absent.
    let test_sigs = signatures_of(&test);
    let train_sigs = signatures_of(&train);
    let want = ((cfg.zero_shot_fraction * test_sigs.len() as f64) + 0.5).floor() as usize;
    let mut natural: Vec<Signature> = test_sigs.difference(&train_sigs).copied().collect();
    let mut shared: Vec<Signature> = test_sigs.intersection(&train_sigs).copied().collect();
    natural.shuffle(&mut rng);
    shared.shuffle(&mut rng);
    let mut withheld: Vec<Signature> = natural.iter().chain(&shared).take(want).copied().collect();
    withheld.sort();
    let withheld_set: BTreeSet<Signature> = withheld.iter().copied().collect();

    for a in &mut train {
        let labels: Vec<(u32, usize)> = a.objects.iter().map(|o| (o.object_id, o.label)).collect();
        let label = |id: u32| labels.iter().find(|(i, _)| *i == id).map(|(_, l)| *l);
        a.triples.retain(|t| match (label(t.subj), label(t.obj)) {
            (Some(s), Some(o)) => !withheld_set.contains(&Signature::from((s, t.pred, o))),
            _ => true,
        });
    }
    // Naturally novel signatures that were not picked are planted into train
    // on fresh objects.
    for sig in natural.iter().filter(|s| !withheld_set.contains(s)) {
        let a = train.choose_mut(&mut rng).expect("train is non-empty");
        let id = a
            .objects
            .iter()
            .map(|o| o.object_id)
            .max()
            .map_or(0, |m| m + 1);
        let (w, h) = (a.width, a.height);
        a.objects
            .push(generator.instance(&mut rng, id, sig.subj, w, h));
        a.objects
            .push(generator.instance(&mut rng, id + 1, sig.obj, w, h));
        a.triples.push(Triple {
            subj: id,
            pred: sig.pred,
            obj: id + 1,
        });
    }

    let dataset = |split, annotations| Dataset {
        split,
        annotations,
        spaces: spaces.clone(),
        d_roi: cfg.d_roi,
    };
    Ok(SynthData {
        train: dataset(Split::Train, train),
        val: dataset(Split::Val, val),
        test: dataset(Split::Test, test),
        objects: EmbeddingTable::new(LabelKind::Object, cfg.d_emb, obj_vectors)?,
        predicates: EmbeddingTable::new(LabelKind::Predicate, cfg.d_emb, pred_vectors)?,
        map: GenerativeMap { home, withheld },
    })
}

/// File names written by [`write_synth`].
pub mod files {
    pub const OBJECTS: &str = "objects.txt";
    pub const PREDICATES: &str = "predicates.txt";
    pub const EMBEDDINGS: &str = "embeddings.txt";
    pub const TRAIN: &str = "train.jsonl";
    pub const VAL: &str = "val.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const MAP: &str = "generative_map.json";
    pub const ORACLE: &str = "oracle_predictions.jsonl";
}

/// Writes label files, one embedding file covering both label spaces, the
/// three annotation splits, the generative map and oracle test predictions
/// into `dir`.
pub fn write_synth(dir: impl AsRef<Path>, data: &SynthData) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spaces = &data.train.spaces;
    write_labels(dir.join(files::OBJECTS), &spaces.object)?;
    write_labels(dir.join(files::PREDICATES), &spaces.predicate)?;
    let entries = spaces
        .object
        .names()
        .iter()
        .zip(&data.objects.vectors)
        .chain(
            spaces
                .predicate
                .names()
                .iter()
                .zip(&data.predicates.vectors),
        )
        .map(|(n, v)| (n.as_str(), v.as_slice()));
    write_token_vectors(dir.join(files::EMBEDDINGS), entries)?;
    write_annotations(dir.join(files::TRAIN), &data.train)?;
    write_annotations(dir.join(files::VAL), &data.val)?;
    write_annotations(dir.join(files::TEST), &data.test)?;
    data.map.save(dir.join(files::MAP))?;
    write_predictions(
        dir.join(files::ORACLE),
        &oracle_image_predictions(&data.test, &data.map),
    )
}

/// Every ordered pair scored one-hot on its generative gold predicate, with
/// given labels at confidence 1.
pub fn oracle_image_predictions(test: &Dataset, map: &GenerativeMap) -> Vec<ImagePredictions> {
    let c = test.spaces.predicate.len();
    test.annotations
        .iter()
        .map(|a| {
            let objects = a
                .objects
                .iter()
                .map(|o| ObjectPrediction {
                    object_id: o.object_id,
                    label: o.label,
                    score: 1.0,
                    bbox: o.bbox,
                })
                .collect();
            let mut pairs = Vec::new();
            for (i, s) in a.objects.iter().enumerate() {
                for (j, o) in a.objects.iter().enumerate() {
                    if i != j {
                        let mut scores = vec![0.0; c];
                        scores[map.gold(s.label, o.label)] = 1.0;
                        pairs.push(PairPrediction {
                            subj: i,
                            obj: j,
                            scores,
                        });
                    }
                }
            }
            ImagePredictions {
                image_id: a.image_id.clone(),
                objects,
                pairs,
            }
        })
        .collect()
}

/// Ranked form of [`oracle_image_predictions`]: every ordered pair with its gold
/// predicate at score 1.
pub fn oracle_predictions(test: &Dataset, map: &GenerativeMap) -> Vec<RankedPrediction> {
    oracle_image_predictions(test, map)
        .iter()
        .map(rank)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgs::count_predicates;
    use crate::ingest::build_zero_shot_index;
    use crate::types::validate_annotation;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            images: 300,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn annotations_are_valid() {
        let d = generate(&small(1)).unwrap();
        for split in [&d.train, &d.val, &d.test] {
            for a in &split.annotations {
                assert!(
                    validate_annotation(a, &split.spaces, split.d_roi).is_empty(),
                    "{}",
                    a.image_id
                );
                for t in &a.triples {
                    let s = a.object(t.subj).unwrap().label;
                    assert_eq!(t.pred, d.map.gold(s, a.object(t.obj).unwrap().label));
                }
            }
        }
        assert_eq!(
            d.train.annotations.len() + d.val.annotations.len() + d.test.annotations.len(),
            300
        );
    }

    #[test]
    fn withheld_signatures_are_exactly_the_zero_shot_index() {
        for (seed, f) in [(2, 0.2), (3, 0.0), (4, 0.5)] {
            let d = generate(&SynthConfig {
                zero_shot_fraction: f,
                ..small(seed)
            })
            .unwrap();
            let zs = build_zero_shot_index(&d.train, &d.test).unwrap();
            let expected: BTreeSet<_> = d.map.withheld.iter().copied().collect();
            assert_eq!(zs.signatures, expected);
            let n = signatures_of(&d.test.annotations).len();
            assert_eq!(zs.len(), (f * n as f64 + 0.5).floor() as usize);
        }
    }

    #[test]
    fn unskewed_law_is_uniform() {
        let cfg = SynthConfig {
            zipf_s: 0.0,
            zero_shot_fraction: 0.0,
            c_pred: 10,
            c_obj: 30,
            images: 400,
            ..small(5)
        };
        let d = generate(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.c_pred];
        for split in [&d.train, &d.val, &d.test] {
            for (c, n) in counts.iter_mut().zip(count_predicates(split)) {
                *c += n;
            }
        }
        let total: usize = counts.iter().sum();
        let mean = total as f64 / cfg.c_pred as f64;
        let sd = (mean * (1.0 - 1.0 / cfg.c_pred as f64)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{c} vs {mean} ± {sd}");
        }
    }

    #[test]
    fn skew_makes_a_head() {
        let d = generate(&small(6)).unwrap();
        let counts = count_predicates(&d.train);
        assert_eq!(
            crate::fkr::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()),
            0
        );
        assert!(counts[0] > 10 * counts[19]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synth(a.path(), &generate(&small(7)).unwrap()).unwrap();
        write_synth(b.path(), &generate(&small(7)).unwrap()).unwrap();
        for f in [
            files::OBJECTS,
            files::EMBEDDINGS,
            files::TRAIN,
            files::VAL,
            files::TEST,
            files::MAP,
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let c = generate(&small(8)).unwrap();
        assert_ne!(c.train, generate(&small(7)).unwrap().train);
    }

    #[test]
    fn infeasible_configs() {
        assert!(generate(&SynthConfig {
            zero_shot_fraction: 1.0,
            ..small(0)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            c_obj: 3,
            c_pred: 5,
            ..small(0)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            images: 0,
            ..small(0)
        })
        .is_err());
    }

    #[test]
    fn labels_cluster_around_their_home_predicate() {
        let d = generate(&small(9)).unwrap();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for (a, e) in d.objects.vectors.iter().enumerate() {
            let own = dist(e, &d.predicates.vectors[d.map.home[a]]);
            for (p, q) in d.predicates.vectors.iter().enumerate() {
                if p != d.map.home[a] {
                    assert!(own < dist(e, q));
                }
            }
        }
    }
}
