//! Factual-knowledge refinement of predicate distributions.
//!
//! The refinement vector lives in distance space,
//! `v = α (d(ô_subj, P) + d(ô_obj, P)) + (1 − α) d(p̂, P)`, and is turned into
//! an affinity `w = exp(−v)` before the Hadamard product with the predicted
//! distribution, so predicates close to both objects and to the original
//! prediction gain mass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EmbeddingTable;
use crate::predict::ImagePredictions;

pub const DEFAULT_ALPHA: f64 = 0.35;

/// A probability vector over predicates.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateDistribution(Vec<f64>);

impl PredicateDistribution {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(
                "distribution has negative or non-finite entries".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Config(format!("distribution sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative scores to sum to one.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        let sum: f64 = scores.iter().sum();
        if !(sum > 0.0) || scores.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(Error::Config("scores cannot be normalized".into()));
        }
        Ok(Self(scores.iter().map(|s| s / sum).collect()))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance from `a` to every predicate embedding.
pub fn distance_vector(a: &[f64], predicates: &EmbeddingTable) -> Result<Vec<f64>> {
    if a.len() != predicates.dim {
        return Err(Error::DimensionMismatch {
            expected: predicates.dim,
            actual: a.len(),
        });
    }
    Ok(predicates.vectors.iter().map(|p| euclidean(a, p)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementVector {
    /// Distance-space refinement vector.
    pub v: Vec<f64>,
    /// Affinity `exp(−v)`.
    pub w: Vec<f64>,
}

impl RefinementVector {
    pub fn from_distances(v: Vec<f64>) -> Self {
        let w = v.iter().map(|x| (-x).exp()).collect();
        Self { v, w }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} outside [0, 1]")))
    }
}

pub fn refinement_vector(
    subj: &[f64],
    obj: &[f64],
    pred: &[f64],
    predicates: &EmbeddingTable,
    alpha: f64,
) -> Result<RefinementVector> {
    check_alpha(alpha)?;
    let ds = distance_vector(subj, predicates)?;
    let d_o = distance_vector(obj, predicates)?;
    let dp = distance_vector(pred, predicates)?;
    let v = ds
        .iter()
        .zip(&d_o)
        .zip(&dp)
        .map(|((s, o), p)| alpha * (s + o) + (1.0 - alpha) * p)
        .collect();
    Ok(RefinementVector::from_distances(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub index: usize,
    /// `D ⊙ w`, renormalized to sum to one.
    pub scores: Vec<f64>,
}

/// Re-ranks `dist` by the refinement affinity. Computed in log space so large
/// distances do not underflow; the renormalized result equals `D ⊙ exp(−v)`.
pub fn refine(dist: &[f64], rv: &RefinementVector) -> Result<Refined> {
    if dist.len() != rv.v.len() {
        return Err(Error::DimensionMismatch {
            expected: rv.v.len(),
            actual: dist.len(),
        });
    }
    let log_scores: Vec<f64> = dist
        .iter()
        .zip(&rv.v)
        .map(|(d, v)| {
            if *d > 0.0 {
                d.ln() - v
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateRefinement);
    }
    let mut scores: Vec<f64> = log_scores.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = scores.iter().sum();
    scores.iter_mut().for_each(|s| *s /= sum);
    Ok(Refined {
        index: argmax(&scores),
        scores,
    })
}

/// Precomputed label-to-predicate distances for refining many pairs.
#[derive(Debug, Clone)]
pub struct Refiner {
    alpha: f64,
    object_to_pred: Vec<Vec<f64>>,
    pred_to_pred: Vec<Vec<f64>>,
}

impl Refiner {
    pub fn new(objects: &EmbeddingTable, predicates: &EmbeddingTable, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let object_to_pred = objects
            .vectors
            .iter()
            .map(|e| distance_vector(e, predicates))
            .collect::<Result<_>>()?;
        let pred_to_pred = predicates
            .vectors
            .iter()
            .map(|e| distance_vector(e, predicates))
            .collect::<Result<_>>()?;
        Ok(Self {
            alpha,
            object_to_pred,
            pred_to_pred,
        })
    }

    pub fn vector(
        &self,
        subj_label: usize,
        obj_label: usize,
        original: usize,
    ) -> Result<RefinementVector> {
        let miss = |what: &str, i: usize| Error::MissingEmbedding(format!("{what} label {i}"));
        let ds = self
            .object_to_pred
            .get(subj_label)
            .ok_or_else(|| miss("object", subj_label))?;
        let d_o = self
            .object_to_pred
            .get(obj_label)
            .ok_or_else(|| miss("object", obj_label))?;
        let dp = self
            .pred_to_pred
            .get(original)
            .ok_or_else(|| miss("predicate", original))?;
        let a = self.alpha;
        let v = ds
            .iter()
            .zip(d_o)
            .zip(dp)
            .map(|((s, o), p)| a * (s + o) + (1.0 - a) * p)
            .collect();
        Ok(RefinementVector::from_distances(v))
    }
}

/// Audit record of one refined pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub image_id: String,
    pub subj_id: u32,
    pub obj_id: u32,
    pub pre_top: usize,
    pub post_top: usize,
    pub scores: Vec<f64>,
}

/// Refines every pair using the predicted object labels and the pre-refinement
/// top predicate as `p̂`.
pub fn refine_dataset(
    predictions: &[ImagePredictions],
    objects: &EmbeddingTable,
    predicates: &EmbeddingTable,
    alpha: f64,
) -> Result<(Vec<ImagePredictions>, Vec<RefinementRecord>)> {
    let refiner = Refiner::new(objects, predicates, alpha)?;
    let mut out = Vec::with_capacity(predictions.len());
    let mut records = Vec::new();
    for img in predictions {
        let mut refined = img.clone();
        for pair in &mut refined.pairs {
            let subj = &img.objects[pair.subj];
            let obj = &img.objects[pair.obj];
            let pre_top = argmax(&pair.scores);
            let rv = refiner.vector(subj.label, obj.label, pre_top)?;
            let r = refine(&pair.scores, &rv)?;
            records.push(RefinementRecord {
                image_id: img.image_id.clone(),
                subj_id: subj.object_id,
                obj_id: obj.object_id,
                pre_top,
                post_top: r.index,
                scores: r.scores.clone(),
            });
            pair.scores = r.scores;
        }
        out.push(refined);
    }
    Ok((out, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::{ObjectPrediction, PairPrediction};
    use crate::types::{BoundingBox, LabelKind};

    fn table(kind: LabelKind, vs: Vec<Vec<f64>>) -> EmbeddingTable {
        let dim = vs[0].len();
        EmbeddingTable::new(kind, dim, vs).unwrap()
    }

    #[test]
    fn distances() {
        let p = EmbeddingTable {
            kind: LabelKind::Predicate,
            dim: 2,
            vectors: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
        };
        assert_eq!(distance_vector(&[1.0, 0.0], &p).unwrap(), vec![1.0, 0.0]);
        let same = table(LabelKind::Predicate, vec![vec![1.0, 2.0]; 3]);
        let d = distance_vector(&[0.0, 0.0], &same).unwrap();
        assert!(d.iter().all(|x| *x == d[0]));
        assert!(distance_vector(&[0.0], &same).is_err());
    }

    #[test]
    fn refinement_vector_by_hand() {
        let p = EmbeddingTable {
            kind: LabelKind::Predicate,
            dim: 2,
            vectors: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
        };
        let rv = refinement_vector(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], &p, 0.5).unwrap();
        assert_eq!(rv.v, vec![1.0, 0.5]);

        let rv = refinement_vector(&[3.0, 1.0], &[-2.0, 5.0], &[1.0, 0.0], &p, 0.0).unwrap();
        assert_eq!(rv.v[1], 0.0);
        assert_eq!(argmax(&rv.w), 1);
        assert!(refinement_vector(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &p, 1.5).is_err());
    }

    #[test]
    fn semantics_override_raw_distribution() {
        let rv = RefinementVector::from_distances(vec![1.0, 0.5]);
        assert!((rv.w[0] - 0.36788).abs() < 1e-5);
        assert!((rv.w[1] - 0.60653).abs() < 1e-5);
        let r = refine(&[0.6, 0.4], &rv).unwrap();
        assert_eq!(r.index, 1);
        // Raw products 0.22073 and 0.24261 before renormalization.
        let total = 0.6 * rv.w[0] + 0.4 * rv.w[1];
        assert!((r.scores[0] - 0.6 * rv.w[0] / total).abs() < 1e-12);
        assert!((0.6 * rv.w[0] - 0.22073).abs() < 1e-5);
        assert!((0.4 * rv.w[1] - 0.24261).abs() < 1e-5);
    }

    #[test]
    fn constant_affinity_is_identity() {
        let rv = RefinementVector::from_distances(vec![2.0; 4]);
        let d = [0.1, 0.5, 0.3, 0.1];
        let r = refine(&d, &rv).unwrap();
        assert_eq!(r.index, 1);
        for (a, b) in r.scores.iter().zip(d) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_dominates() {
        let rv = RefinementVector::from_distances(vec![0.0, 5.0, 0.1]);
        assert_eq!(refine(&[0.0, 1.0, 0.0], &rv).unwrap().index, 1);
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let rv = RefinementVector::from_distances(vec![0.0, 1.0]);
        assert!(matches!(
            refine(&[0.0, 0.0], &rv),
            Err(Error::DegenerateRefinement)
        ));
        assert!(refine(&[1.0], &rv).is_err());
    }

    #[test]
    fn huge_distances_do_not_underflow() {
        let rv = RefinementVector::from_distances(vec![2000.0, 2001.0]);
        let r = refine(&[0.2, 0.8], &rv).unwrap();
        assert_eq!(r.index, 1);
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn image(scores: Vec<f64>) -> ImagePredictions {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        ImagePredictions {
            image_id: "i".into(),
            objects: vec![
                ObjectPrediction {
                    object_id: 0,
                    label: 0,
                    score: 1.0,
                    bbox: b,
                },
                ObjectPrediction {
                    object_id: 1,
                    label: 0,
                    score: 1.0,
                    bbox: b,
                },
            ],
            pairs: vec![PairPrediction {
                subj: 0,
                obj: 1,
                scores,
            }],
        }
    }

    #[test]
    fn dataset_refinement_flips_toward_semantics() {
        // Objects sit on predicate 1; predicate 0 is one unit farther away.
        let objects = table(LabelKind::Object, vec![vec![1.0, 0.0]]);
        let preds = table(
            LabelKind::Predicate,
            vec![vec![0.0, 1e-300], vec![1.0, 0.0]],
        );
        let (out, records) =
            refine_dataset(&[image(vec![0.6, 0.4])], &objects, &preds, 0.5).unwrap();
        assert_eq!(records[0].pre_top, 0);
        assert_eq!(records[0].post_top, 1);
        assert_eq!(out[0].pairs[0].scores, records[0].scores);
    }

    #[test]
    fn identical_predicate_embeddings_leave_output_unchanged() {
        let objects = table(LabelKind::Object, vec![vec![1.0, 0.0]]);
        let preds = table(LabelKind::Predicate, vec![vec![0.3, 0.4]; 3]);
        let input = vec![image(vec![0.2, 0.5, 0.3]), image(vec![0.7, 0.1, 0.2])];
        let (out, _) = refine_dataset(&input, &objects, &preds, DEFAULT_ALPHA).unwrap();
        for (a, b) in out.iter().zip(&input) {
            for (x, y) in a.pairs[0].scores.iter().zip(&b.pairs[0].scores) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(refine_dataset(&[], &objects, &preds, DEFAULT_ALPHA)
            .unwrap()
            .0
            .is_empty());
    }

    #[test]
    fn refiner_matches_direct_vector() {
        let objects = table(LabelKind::Object, vec![vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let preds = table(
            LabelKind::Predicate,
            vec![vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, -1.0]],
        );
        let r = Refiner::new(&objects, &preds, 0.35).unwrap();
        let got = r.vector(0, 1, 2).unwrap();
        let want = refinement_vector(
            &objects.vectors[0],
            &objects.vectors[1],
            &preds.vectors[2],
            &preds,
            0.35,
        )
        .unwrap();
        for (a, b) in got.v.iter().zip(&want.v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist(c: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.01f64..1.0, c).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn shifting_v_keeps_argmax(d in dist(5), v in proptest::collection::vec(0.0f64..5.0, 5), k in 0.0f64..10.0) {
                let a = refine(&d, &RefinementVector::from_distances(v.clone())).unwrap();
                let b = refine(&d, &RefinementVector::from_distances(v.iter().map(|x| x + k).collect())).unwrap();
                prop_assert_eq!(a.index, b.index);
            }

            #[test]
            fn scaling_d_keeps_result(d in dist(5), v in proptest::collection::vec(0.0f64..5.0, 5), c in 0.01f64..100.0) {
                let rv = RefinementVector::from_distances(v);
                let a = refine(&d, &rv).unwrap();
                let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
                let b = refine(&scaled, &rv).unwrap();
                prop_assert_eq!(a.index, b.index);
                for (x, y) in a.scores.iter().zip(&b.scores) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn alpha_one_ignores_original(
                s in proptest::collection::vec(-2.0f64..2.0, 3),
                o in proptest::collection::vec(-2.0f64..2.0, 3),
                p in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 4),
            ) {
                prop_assume!(p.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
                let preds = EmbeddingTable::new(LabelKind::Predicate, 3, p.clone()).unwrap();
                let a = refinement_vector(&s, &o, &p[0], &preds, 1.0).unwrap();
                let b = refinement_vector(&s, &o, &p[3], &preds, 1.0).unwrap();
                prop_assert_eq!(a.v, b.v);
            }

            #[test]
            fn affinity_is_monotone(v in proptest::collection::vec(0.0f64..20.0, 6)) {
                let rv = RefinementVector::from_distances(v.clone());
                for j in 0..6 {
                    prop_assert!(rv.w[j] > 0.0 && rv.w[j] <= 1.0);
                    for k in 0..6 {
                        prop_assert_eq!(rv.w[j] > rv.w[k], v[j] < v[k]);
                    }
                }
            }
        }
    }
}
