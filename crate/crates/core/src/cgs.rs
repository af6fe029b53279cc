//! Recall-guided down-sampling of head predicates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::RecallTable;
use crate::rng;
use crate::types::{Dataset, LabelSpace};

pub const DEFAULT_TAU: f64 = 1100.0;
pub const DEFAULT_BETA: f64 = 0.3;

/// Training triple count per predicate.
pub fn count_predicates(train: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; train.spaces.predicate.len()];
    for a in &train.annotations {
        for t in &a.triples {
            counts[t.pred] += 1;
        }
    }
    counts
}

/// Rate at which a predicate with `count` training triples and baseline recall
/// `recall` is kept: `min(τ / (N·β·c), 1)` for head predicates (`N ≥ τ`), 1
/// otherwise. A zero recall keeps every triple.
pub fn sampling_rate(count: usize, recall: f64, tau: f64, beta: f64) -> Result<f64> {
    if !(tau > 0.0) || !(beta > 0.0) {
        return Err(Error::Config(format!(
            "tau ({tau}) and beta ({beta}) must be positive"
        )));
    }
    if !(0.0..=1.0).contains(&recall) {
        return Err(Error::Config(format!("recall {recall} outside [0, 1]")));
    }
    let n = count as f64;
    if n < tau || recall == 0.0 {
        return Ok(1.0);
    }
    Ok((tau / (n * beta * recall)).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingPlan {
    pub counts: Vec<usize>,
    pub recalls: Vec<f64>,
    pub rates: Vec<f64>,
    /// `round_half_up(N_i · s_i)`.
    pub targets: Vec<usize>,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn build(
        train: &Dataset,
        recalls: &RecallTable,
        tau: f64,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        let counts = count_predicates(train);
        if recalls.0.len() != counts.len() {
            return Err(Error::DimensionMismatch {
                expected: counts.len(),
                actual: recalls.0.len(),
            });
        }
        let rates = counts
            .iter()
            .zip(&recalls.0)
            .map(|(&n, &c)| sampling_rate(n, c, tau, beta))
            .collect::<Result<Vec<_>>>()?;
        let targets = counts
            .iter()
            .zip(&rates)
            .map(|(&n, &s)| ((n as f64 * s + 0.5).floor() as usize).min(n))
            .collect();
        Ok(Self {
            counts,
            recalls: recalls.0.clone(),
            rates,
            targets,
            seed,
        })
    }

    /// Keeps everything.
    pub fn identity(train: &Dataset, seed: u64) -> Self {
        let counts = count_predicates(train);
        Self {
            recalls: vec![1.0; counts.len()],
            rates: vec![1.0; counts.len()],
            targets: counts.clone(),
            counts,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.targets == self.counts
    }

    pub fn records<'a>(&self, predicates: &'a LabelSpace) -> Vec<PlanRecord<'a>> {
        predicates
            .names()
            .iter()
            .enumerate()
            .map(|(i, name)| PlanRecord {
                name,
                count: self.counts[i],
                recall: self.recalls[i],
                rate: self.rates[i],
                target: self.targets[i],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanRecord<'a> {
    pub name: &'a str,
    pub count: usize,
    pub recall: f64,
    pub rate: f64,
    pub target: usize,
}

/// Keeps exactly `plan.targets[j]` triples of each predicate `j`, drawn
/// uniformly without replacement. Objects and triple-less annotations are
/// retained.
pub fn resample(train: &Dataset, plan: &SamplingPlan) -> Result<Dataset> {
    let counts = count_predicates(train);
    if counts != plan.counts {
        return Err(Error::Config(
            "sampling plan was built for a different dataset".into(),
        ));
    }
    if plan.is_identity() {
        return Ok(train.clone());
    }

    let mut by_pred: Vec<Vec<(usize, usize)>> = vec![Vec::new(); counts.len()];
    for (ai, a) in train.annotations.iter().enumerate() {
        for (ti, t) in a.triples.iter().enumerate() {
            by_pred[t.pred].push((ai, ti));
        }
    }

    let mut rng = rng::substream(plan.seed, rng::SAMPLING);
    let mut keep: Vec<Vec<bool>> = train
        .annotations
        .iter()
        .map(|a| vec![false; a.triples.len()])
        .collect();
    for (j, members) in by_pred.iter().enumerate() {
        let target = plan.targets[j];
        if target == members.len() {
            members.iter().for_each(|&(ai, ti)| keep[ai][ti] = true);
            continue;
        }
        for k in rand::seq::index::sample(&mut rng, members.len(), target) {
            let (ai, ti) = members[k];
            keep[ai][ti] = true;
        }
    }

    let mut out = train.clone();
    for (a, flags) in out.annotations.iter_mut().zip(&keep) {
        let mut it = flags.iter();
        a.triples.retain(|_| *it.next().unwrap_or(&false));
    }
    Ok(out)
}
