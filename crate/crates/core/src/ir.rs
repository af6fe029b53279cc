//! Informative re-weighting: per-predicate information content, the weighted
//! predicate loss and total-loss assembly.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fkr::PredicateDistribution;
use crate::types::LabelSpace;

pub const DEFAULT_MU: f64 = 1.2;
const PROB_FLOOR: f64 = 1e-12;

/// Training frequencies, information content in bits and mean-one weights.
///
/// Predicates never seen in training get the largest observed weight and the
/// largest observed number of bits.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoWeights {
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
    pub bits: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn info_weights(counts: &[usize]) -> Result<InfoWeights> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoCounts);
    }
    let frequencies: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let observed_bits: Vec<Option<f64>> = frequencies
        .iter()
        .map(|&f| (f > 0.0).then(|| -f.log2()))
        .collect();
    let seen: Vec<f64> = observed_bits.iter().flatten().copied().collect();
    let mean = seen.iter().sum::<f64>() / seen.len() as f64;
    let max_bits = seen.iter().copied().fold(0.0, f64::max);

    let weights_seen: Vec<Option<f64>> = observed_bits
        .iter()
        .map(|b| b.map(|b| if mean > 0.0 { b / mean } else { 1.0 }))
        .collect();
    let max_weight = weights_seen.iter().flatten().copied().fold(0.0, f64::max);

    Ok(InfoWeights {
        counts: counts.to_vec(),
        frequencies,
        bits: observed_bits
            .iter()
            .map(|b| b.unwrap_or(max_bits))
            .collect(),
        weights: weights_seen
            .iter()
            .map(|w| w.unwrap_or(max_weight))
            .collect(),
    })
}

impl InfoWeights {
    /// All-ones weights: plain cross-entropy.
    pub fn uniform(len: usize) -> Vec<f64> {
        vec![1.0; len]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightRecord<'a> {
    pub name: &'a str,
    pub count: usize,
    pub frequency: f64,
    pub bits: f64,
    pub weight: f64,
}

pub fn weight_records<'a>(w: &InfoWeights, predicates: &'a LabelSpace) -> Vec<WeightRecord<'a>> {
    predicates
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| WeightRecord {
            name,
            count: w.counts[i],
            frequency: w.frequencies[i],
            bits: w.bits[i],
            weight: w.weights[i],
        })
        .collect()
}

/// Mean over pairs of `weights[gold] · (−ln p_gold)`. Zero probabilities are
/// floored at 1e-12.
pub fn weighted_pred_loss(
    dists: &[PredicateDistribution],
    gold: &[usize],
    weights: &[f64],
) -> Result<f64> {
    if dists.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: dists.len(),
            actual: gold.len(),
        });
    }
    if dists.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (d, &g) in dists.iter().zip(gold) {
        let p = *d.probs().get(g).ok_or(Error::DimensionMismatch {
            expected: d.len(),
            actual: g + 1,
        })?;
        let w = *weights.get(g).ok_or(Error::DimensionMismatch {
            expected: weights.len(),
            actual: g + 1,
        })?;
        let p = if p <= 0.0 {
            log::warn!("probability of gold predicate {g} is zero; clamping");
            PROB_FLOOR
        } else {
            p
        };
        total -= w * p.ln();
    }
    Ok(total / dists.len() as f64)
}

/// All terms of the total training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_c: f64,
    pub l_iw: f64,
    pub mu: f64,
    pub total: f64,
}

pub fn total_loss(l_box: f64, l_obj: f64, l_c: f64, l_iw: f64, mu: f64) -> LossBundle {
    LossBundle {
        l_box,
        l_obj,
        l_c,
        l_iw,
        mu,
        total: l_box + l_obj + l_c + mu * l_iw,
    }
}
