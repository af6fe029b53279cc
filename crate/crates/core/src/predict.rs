//! Per-pair predicate predictions and graph-constrained ranking.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fkr::argmax;
use crate::ingest::EmbeddingTable;
use crate::jfl::RelationModel;
use crate::metrics::{RankedPrediction, RankedTriple, Subtask};
use crate::types::{BoundingBox, SceneGraphAnnotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrediction {
    pub object_id: u32,
    pub label: usize,
    /// Label confidence; 1 for given labels.
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    /// Index into [`ImagePredictions::objects`].
    pub subj: usize,
    pub obj: usize,
    /// Predicate distribution.
    pub scores: Vec<f64>,
}

/// Predicted objects and a predicate distribution for every ordered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub objects: Vec<ObjectPrediction>,
    pub pairs: Vec<PairPrediction>,
}

/// Nearest object label of a projected region feature by cosine similarity,
/// with the softmax weight of that label as its confidence.
fn classify_object(
    model: &RelationModel,
    feature: &[f64],
    objects: &EmbeddingTable,
) -> (usize, f64) {
    let z = model.project(feature);
    let zn = z.dot(&z).sqrt();
    if zn == 0.0 {
        return (0, 1.0 / objects.len().max(1) as f64);
    }
    let sims: Vec<f64> = objects
        .vectors
        .iter()
        .map(|e| {
            let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            e.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() / (en * zn)
        })
        .collect();
    let best = argmax(&sims);
    let z: f64 = sims.iter().map(|s| (s - sims[best]).exp()).sum();
    (best, 1.0 / z)
}

/// Scores every ordered object pair of `annotation`. Under PredCls the given
/// labels are used; otherwise labels come from the projected features.
pub fn predict_image(
    model: &RelationModel,
    annotation: &SceneGraphAnnotation,
    objects: &EmbeddingTable,
    subtask: Subtask,
) -> ImagePredictions {
    let preds: Vec<ObjectPrediction> = annotation
        .objects
        .iter()
        .map(|o| {
            let (label, score) = match subtask {
                Subtask::PredCls => (o.label, 1.0),
                Subtask::SgCls | Subtask::SgGen => classify_object(model, &o.feature, objects),
            };
            ObjectPrediction {
                object_id: o.object_id,
                label,
                score,
                bbox: o.bbox,
            }
        })
        .collect();

    let n = annotation.objects.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let x = model.pair_input(
                &annotation.objects[i],
                &annotation.objects[j],
                annotation.width,
                annotation.height,
            );
            pairs.push(PairPrediction {
                subj: i,
                obj: j,
                scores: model.predicate_distribution(x.view()),
            });
        }
    }
    ImagePredictions {
        image_id: annotation.image_id.clone(),
        objects: preds,
        pairs,
    }
}

pub fn predict_dataset(
    model: &RelationModel,
    annotations: &[SceneGraphAnnotation],
    objects: &EmbeddingTable,
    subtask: Subtask,
) -> Vec<ImagePredictions> {
    use rayon::prelude::*;
    annotations
        .par_iter()
        .map(|a| predict_image(model, a, objects, subtask))
        .collect()
}

/// Graph-constrained ranking: each pair contributes its top predicate, scored
/// by predicate score × subject confidence × object confidence. Ties keep pair
/// order.
pub fn rank(pred: &ImagePredictions) -> RankedPrediction {
    let mut entries: Vec<RankedTriple> = pred
        .pairs
        .iter()
        .map(|p| {
            let s = &pred.objects[p.subj];
            let o = &pred.objects[p.obj];
            let top = argmax(&p.scores);
            RankedTriple {
                subj_id: s.object_id,
                subj_label: s.label,
                subj_box: s.bbox,
                pred: top,
                obj_id: o.object_id,
                obj_label: o.label,
                obj_box: o.bbox,
                score: p.scores[top] * s.score * o.score,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    RankedPrediction {
        image_id: pred.image_id.clone(),
        entries,
    }
}

/// One image per line.
pub fn write_predictions(path: impl AsRef<Path>, preds: &[ImagePredictions]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_predictions(
    path: impl AsRef<Path>,
    num_predicates: usize,
) -> Result<Vec<ImagePredictions>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: ImagePredictions =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        for pair in &p.pairs {
            if pair.subj >= p.objects.len() || pair.obj >= p.objects.len() {
                return Err(Error::parse(
                    path,
                    i + 1,
                    "pair references a missing object",
                ));
            }
            if pair.scores.len() != num_predicates {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!(
                        "expected {num_predicates} predicate scores, got {}",
                        pair.scores.len()
                    ),
                ));
            }
        }
        out.push(p);
    }
    Ok(out)
}
