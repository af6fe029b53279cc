use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{backward, batch_losses, forward, Objective, RelationModel};
use crate::error::{Error, Result};
use crate::ingest::{EmbeddingTable, ZeroShotIndex};
use crate::ir::info_weights;
use crate::metrics::{evaluate, EvalConfig, Subtask};
use crate::predict::{predict_dataset, rank};
use crate::rng;
use crate::types::Dataset;

pub const DEFAULT_LR: f64 = 0.001;
const VAL_K: usize = 50;
const LR_DECAY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    /// Images per step.
    pub batch_size: usize,
    /// Validation rounds without improvement before the learning rate decays.
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub mu: f64,
    pub use_jfl: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            iterations: 1000,
            batch_size: 8,
            patience: 3,
            eval_every: 100,
            seed: 0,
            mu: crate::ir::DEFAULT_MU,
            use_jfl: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_c: f64,
    pub l_iw: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RelationModel,
    pub history: Vec<LossRecord>,
    pub final_lr: f64,
    /// `(iteration, mR@50)` for each validation round.
    pub validation: Vec<(usize, f64)>,
}

fn validation_mean_recall(
    model: &RelationModel,
    val: &Dataset,
    objects: &EmbeddingTable,
) -> Result<f64> {
    let ranked: Vec<_> = predict_dataset(model, &val.annotations, objects, Subtask::PredCls)
        .iter()
        .map(rank)
        .collect();
    let info = info_weights(&vec![1; val.spaces.predicate.len()])?;
    let config = EvalConfig {
        ks: vec![VAL_K],
        subtask: Subtask::PredCls,
    };
    let report = evaluate(&ranked, val, &ZeroShotIndex::default(), &info, &config)?;
    Ok(report.per_k[0].mean_recall.unwrap_or(0.0))
}

/// Mini-batch SGD on `contrastive · L_c + mu · L_IW`. Images are visited in a
/// shuffled order drawn from the batch substream of `config.seed`, reshuffled
/// every pass. The learning rate drops ×0.1 after `patience` validation rounds
/// without a new best mR@50.
pub fn train(
    mut model: RelationModel,
    train: &Dataset,
    val: Option<&Dataset>,
    objects: &EmbeddingTable,
    pred_weights: &[f64],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    use rayon::prelude::*;

    let usable: Vec<usize> = (0..train.annotations.len())
        .filter(|&i| !train.annotations[i].objects.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pred_weights.len() != model.num_predicates() {
        return Err(Error::DimensionMismatch {
            expected: model.num_predicates(),
            actual: pred_weights.len(),
        });
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(config.lr >= 0.0) {
        return Err(Error::Config(format!(
            "learning rate {} must be non-negative",
            config.lr
        )));
    }

    let objective = Objective::new(config.use_jfl, config.mu, pred_weights.to_vec());
    let mut batch_rng = rng::substream(config.seed, rng::BATCH);
    let mut order = usable.clone();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0;

    let mut lr = config.lr;
    let mut best = f64::NEG_INFINITY;
    let mut stalls = 0;
    let mut history = Vec::with_capacity(config.iterations);
    let mut validation = Vec::new();

    for it in 0..config.iterations {
        let mut picked = Vec::with_capacity(config.batch_size);
        while picked.len() < config.batch_size.min(usable.len()) {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let model_ref = &model;
        let forwards = picked
            .par_iter()
            .map(|&i| forward(model_ref, &train.annotations[i], objects))
            .collect::<Result<Vec<_>>>()?;
        let (batches, losses): (Vec<_>, Vec<_>) = forwards
            .into_iter()
            .map(|f| (f.batch, f.contrastive))
            .unzip();
        let (l_c, l_iw, total) = batch_losses(&batches, &losses, &objective);
        history.push(LossRecord {
            iteration: it,
            l_c,
            l_iw,
            total,
        });
        if lr > 0.0 {
            let grads = backward(&model, &batches, &objective)?;
            model.apply(&grads, lr);
        }

        if let Some(val) = val {
            if config.eval_every > 0 && (it + 1) % config.eval_every == 0 {
                let m = validation_mean_recall(&model, val, objects)?;
                validation.push((it + 1, m));
                if m > best {
                    best = m;
                    stalls = 0;
                } else {
                    stalls += 1;
                    if config.patience > 0 && stalls >= config.patience {
                        lr *= LR_DECAY;
                        stalls = 0;
                        log::info!("iteration {}: validation plateau, lr -> {lr}", it + 1);
                    }
                }
            }
        }
    }

    Ok(TrainOutcome {
        model,
        history,
        final_lr: lr,
        validation,
    })
}

/// `iteration,l_c,l_iw,total`.
pub fn write_loss_history(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "iteration,l_c,l_iw,total").map_err(io)?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.iteration, r.l_c, r.l_iw, r.total).map_err(io)?;
    }
    w.flush().map_err(io)
}
