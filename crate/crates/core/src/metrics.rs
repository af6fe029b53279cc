//! Triple matching and the recall family: R@K, mR@K, zR@K and mRIC@K.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{RecallTable, ZeroShotIndex};
use crate::ir::InfoWeights;
use crate::types::{triple_signature, BoundingBox, Dataset, SceneGraphAnnotation, Signature};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subtask {
    #[serde(rename = "PredCls")]
    PredCls,
    #[serde(rename = "SGCls")]
    SgCls,
    #[serde(rename = "SGGen")]
    SgGen,
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subtask::PredCls => "PredCls",
            Subtask::SgCls => "SGCls",
            Subtask::SgGen => "SGGen",
        })
    }
}

impl std::str::FromStr for Subtask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Subtask::PredCls),
            "sgcls" => Ok(Subtask::SgCls),
            "sggen" | "sgdet" => Ok(Subtask::SgGen),
            other => Err(format!("unknown subtask {other:?}")),
        }
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedTriple {
    pub subj_id: u32,
    pub subj_label: usize,
    pub subj_box: BoundingBox,
    pub pred: usize,
    pub obj_id: u32,
    pub obj_label: usize,
    pub obj_box: BoundingBox,
    pub score: f64,
}

/// One image's triples in descending score order, at most one per ordered
/// instance pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub image_id: String,
    pub entries: Vec<RankedTriple>,
}

/// For each ground-truth triple, the rank of the prediction that matched it.
/// Predictions are visited in rank order and each claims the first unmatched
/// compatible triple, so the matches at `K` are the ranks below `K`.
pub fn match_ranks(
    pred: &RankedPrediction,
    gt: &SceneGraphAnnotation,
    protocol: Subtask,
) -> Vec<Option<usize>> {
    let gt_objs: Vec<_> = gt
        .triples
        .iter()
        .map(|t| (gt.object(t.subj), gt.object(t.obj)))
        .collect();
    let mut ranks = vec![None; gt.triples.len()];
    for (r, e) in pred.entries.iter().enumerate() {
        let hit = gt.triples.iter().enumerate().position(|(i, t)| {
            if ranks[i].is_some() || t.pred != e.pred {
                return false;
            }
            let (Some(s), Some(o)) = gt_objs[i] else {
                return false;
            };
            if s.label != e.subj_label || o.label != e.obj_label {
                return false;
            }
            match protocol {
                Subtask::PredCls | Subtask::SgCls => {
                    e.subj_id == s.object_id && e.obj_id == o.object_id
                }
                Subtask::SgGen => {
                    iou(&e.subj_box, &s.bbox) >= IOU_THRESHOLD
                        && iou(&e.obj_box, &o.bbox) >= IOU_THRESHOLD
                }
            }
        });
        if let Some(i) = hit {
            ranks[i] = Some(r);
        }
    }
    ranks
}

/// Matched flag per ground-truth triple within the top `k`.
pub fn match_triples(
    pred: &RankedPrediction,
    gt: &SceneGraphAnnotation,
    k: usize,
    protocol: Subtask,
) -> Vec<bool> {
    match_ranks(pred, gt, protocol)
        .into_iter()
        .map(|r| r.is_some_and(|r| r < k))
        .collect()
}

/// Mean over images of matched/GT, skipping images without ground truth.
/// Input pairs are `(matched, gt)`.
pub fn recall_at_k(per_image: &[(usize, usize)]) -> Option<f64> {
    let recalls: Vec<f64> = per_image
        .iter()
        .filter(|(_, gt)| *gt > 0)
        .map(|&(m, gt)| m as f64 / gt as f64)
        .collect();
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Per-predicate recall over the split and their mean over predicates with
/// ground truth.
pub fn mean_recall_at_k(matched: &[usize], gt: &[usize]) -> (Option<f64>, Vec<Option<f64>>) {
    let per: Vec<Option<f64>> = matched
        .iter()
        .zip(gt)
        .map(|(&m, &g)| (g > 0).then(|| m as f64 / g as f64))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (mean, per)
}

/// Matching outcome of one image, reusable across every `K`.
#[derive(Debug, Clone)]
pub struct ImageMatch {
    pub preds: Vec<usize>,
    pub signatures: Vec<Signature>,
    pub ranks: Vec<Option<usize>>,
}

impl ImageMatch {
    pub fn new(
        pred: &RankedPrediction,
        gt: &SceneGraphAnnotation,
        protocol: Subtask,
    ) -> Result<Self> {
        let signatures = gt
            .triples
            .iter()
            .map(|t| triple_signature(t, gt))
            .collect::<Result<_>>()?;
        Ok(Self {
            preds: gt.triples.iter().map(|t| t.pred).collect(),
            signatures,
            ranks: match_ranks(pred, gt, protocol),
        })
    }

    pub fn matched(&self, k: usize) -> impl Iterator<Item = bool> + '_ {
        self.ranks.iter().map(move |r| r.is_some_and(|r| r < k))
    }
}

/// R@K restricted to ground truth whose signature is in `zs`; absent when no
/// such triple exists.
pub fn zero_shot_recall_at_k(matches: &[ImageMatch], zs: &ZeroShotIndex, k: usize) -> Option<f64> {
    let per_image: Vec<(usize, usize)> = matches
        .iter()
        .map(|m| {
            m.signatures
                .iter()
                .zip(m.matched(k))
                .filter(|(s, _)| zs.contains(s))
                .fold((0, 0), |(hit, n), (_, ok)| (hit + usize::from(ok), n + 1))
        })
        .collect();
    recall_at_k(&per_image)
}

/// Σ over predicates with ground truth of recall × information bits.
pub fn mric_at_k(per_predicate: &[Option<f64>], bits: &[f64]) -> Option<f64> {
    let terms: Vec<f64> = per_predicate
        .iter()
        .zip(bits)
        .filter_map(|(r, b)| r.map(|r| r * b))
        .collect();
    (!terms.is_empty()).then(|| terms.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
    pub zero_shot_recall: Option<f64>,
    pub mric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub name: String,
    pub gt_count: usize,
    /// One entry per `K`, in report order.
    pub recall: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subtask: Subtask,
    pub per_k: Vec<KMetrics>,
    pub per_predicate: Vec<PredicateRecall>,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.per_k.iter().find(|m| m.k == k)
    }

    /// Per-predicate recall at `k` as a table; predicates without ground truth
    /// get 0.
    pub fn recall_table(&self, k: usize) -> Option<RecallTable> {
        let idx = self.per_k.iter().position(|m| m.k == k)?;
        Some(RecallTable(
            self.per_predicate
                .iter()
                .map(|p| p.recall[idx].unwrap_or(0.0))
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub subtask: Subtask,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            subtask: Subtask::PredCls,
        }
    }
}

/// Scores ranked predictions against `test`. Images without predictions count
/// as zero recall; predictions for unknown images are an error.
pub fn evaluate(
    predictions: &[RankedPrediction],
    test: &Dataset,
    zs: &ZeroShotIndex,
    info: &InfoWeights,
    config: &EvalConfig,
) -> Result<MetricReport> {
    use rayon::prelude::*;
    use std::collections::HashMap;

    let c = test.spaces.predicate.len();
    if info.bits.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            actual: info.bits.len(),
        });
    }
    let by_id: HashMap<&str, &RankedPrediction> = predictions
        .iter()
        .map(|p| (p.image_id.as_str(), p))
        .collect();
    let known: std::collections::HashSet<&str> = test
        .annotations
        .iter()
        .map(|a| a.image_id.as_str())
        .collect();
    if let Some(p) = predictions
        .iter()
        .find(|p| !known.contains(p.image_id.as_str()))
    {
        return Err(Error::Config(format!(
            "prediction for unknown image {}",
            p.image_id
        )));
    }
    let empty = RankedPrediction {
        image_id: String::new(),
        entries: Vec::new(),
    };

    let matches = test
        .annotations
        .par_iter()
        .map(|a| {
            let p = by_id.get(a.image_id.as_str()).copied().unwrap_or(&empty);
            ImageMatch::new(p, a, config.subtask)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut gt_per_pred = vec![0usize; c];
    for m in &matches {
        for &p in &m.preds {
            gt_per_pred[p] += 1;
        }
    }

    let mut per_k = Vec::with_capacity(config.ks.len());
    let mut per_pred_recalls: Vec<Vec<Option<f64>>> = vec![Vec::new(); c];
    for &k in &config.ks {
        let mut matched_per_pred = vec![0usize; c];
        let per_image: Vec<(usize, usize)> = matches
            .iter()
            .map(|m| {
                let mut hit = 0;
                for (ok, &p) in m.matched(k).zip(&m.preds) {
                    if ok {
                        hit += 1;
                        matched_per_pred[p] += 1;
                    }
                }
                (hit, m.preds.len())
            })
            .collect();
        let (mean_recall, per_pred) = mean_recall_at_k(&matched_per_pred, &gt_per_pred);
        for (acc, r) in per_pred_recalls.iter_mut().zip(&per_pred) {
            acc.push(*r);
        }
        per_k.push(KMetrics {
            k,
            recall: recall_at_k(&per_image),
            mean_recall,
            zero_shot_recall: zero_shot_recall_at_k(&matches, zs, k),
            mric: mric_at_k(&per_pred, &info.bits),
        });
    }

    let per_predicate = test
        .spaces
        .predicate
        .names()
        .iter()
        .zip(per_pred_recalls)
        .zip(&gt_per_pred)
        .map(|((name, recall), &gt_count)| PredicateRecall {
            name: name.clone(),
            gt_count,
            recall,
        })
        .collect();

    Ok(MetricReport {
        subtask: config.subtask,
        per_k,
        per_predicate,
    })
}

/// `name,gt_count,recall@K...` with empty cells for predicates without ground truth.
pub fn write_per_predicate_csv(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    write!(w, "name,gt_count").map_err(io)?;
    for m in &report.per_k {
        write!(w, ",recall@{}", m.k).map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for p in &report.per_predicate {
        write!(w, "{},{}", p.name, p.gt_count).map_err(io)?;
        for r in &p.recall {
            match r {
                Some(r) => write!(w, ",{r}").map_err(io)?,
                None => write!(w, ",").map_err(io)?,
            }
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
