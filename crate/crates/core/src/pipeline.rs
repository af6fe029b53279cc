//! End-to-end runs: resample, weight, train, predict, refine and evaluate,
//! singly or as an ablation grid over module toggles.

use std::collections::HashMap;

use serde::Serialize;

use crate::cgs::{count_predicates, resample, SamplingPlan};
use crate::config::{RunConfig, Toggles};
use crate::error::Result;
use crate::fkr::refine_dataset;
use crate::ingest::{
    annotation_d_roi, build_zero_shot_index, load_annotations, load_embeddings, load_labels,
    EmbeddingTable, RecallTable, ZeroShotIndex,
};
use crate::ir::{info_weights, InfoWeights};
use crate::jfl::{train, RelationModel, TrainOutcome};
use crate::metrics::{evaluate, EvalConfig, MetricReport, Subtask};
use crate::predict::{predict_dataset, rank, ImagePredictions};
use crate::rng;
use crate::types::{Dataset, LabelKind, LabelSpaces, Split};

/// Per-predicate recall at this `K` on validation feeds the sampling rates.
pub const RECALL_K: usize = 100;

/// Everything a run reads.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub objects: EmbeddingTable,
    pub predicates: EmbeddingTable,
}

impl Inputs {
    pub fn zero_shot(&self) -> Result<ZeroShotIndex> {
        build_zero_shot_index(&self.train, &self.test)
    }

    /// Information content from the unresampled training split.
    pub fn info(&self) -> Result<InfoWeights> {
        info_weights(&count_predicates(&self.train))
    }
}

pub fn load_spaces(cfg: &RunConfig) -> Result<LabelSpaces> {
    Ok(LabelSpaces {
        object: load_labels(cfg.objects_path()?, LabelKind::Object)?,
        predicate: load_labels(cfg.predicates_path()?, LabelKind::Predicate)?,
    })
}

pub fn load_split(
    path: impl AsRef<std::path::Path>,
    split: Split,
    spaces: &LabelSpaces,
) -> Result<Dataset> {
    let path = path.as_ref();
    load_annotations(path, split, spaces, annotation_d_roi(path)?)
}

/// Label spaces, all three splits and both embedding tables named by `cfg`.
pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let spaces = load_spaces(cfg)?;
    let train = load_split(cfg.train_path()?, Split::Train, &spaces)?;
    let val = load_split(cfg.val_path()?, Split::Val, &spaces)?;
    let test = load_split(cfg.test_path()?, Split::Test, &spaces)?;
    for d in [&val, &test] {
        if d.d_roi != train.d_roi {
            return Err(crate::error::Error::DimensionMismatch {
                expected: train.d_roi,
                actual: d.d_roi,
            });
        }
    }
    let embeddings = cfg.embeddings_path()?;
    Ok(Inputs {
        objects: load_embeddings(&embeddings, &spaces.object)?,
        predicates: load_embeddings(&embeddings, &spaces.predicate)?,
        train,
        val,
        test,
    })
}

/// A fresh model drawn from the init substream of `seed`.
pub fn initial_model(inputs: &Inputs, seed: u64) -> RelationModel {
    RelationModel::init(
        inputs.train.d_roi,
        inputs.objects.dim,
        inputs.train.spaces.predicate.len(),
        &mut rng::substream(seed, rng::INIT),
    )
}

pub fn predict(
    model: &RelationModel,
    dataset: &Dataset,
    objects: &EmbeddingTable,
    subtask: Subtask,
) -> Vec<ImagePredictions> {
    predict_dataset(model, &dataset.annotations, objects, subtask)
}

/// Per-predicate recall at [`RECALL_K`] of `model` on validation.
pub fn validation_recalls(
    model: &RelationModel,
    inputs: &Inputs,
    subtask: Subtask,
) -> Result<RecallTable> {
    let ranked: Vec<_> = predict(model, &inputs.val, &inputs.objects, subtask)
        .iter()
        .map(rank)
        .collect();
    let config = EvalConfig {
        ks: vec![RECALL_K],
        subtask,
    };
    let report = evaluate(
        &ranked,
        &inputs.val,
        &ZeroShotIndex::default(),
        &inputs.info()?,
        &config,
    )?;
    Ok(report.recall_table(RECALL_K).expect("K is in the report"))
}

/// Training set and predicate weights a variant trains on.
pub fn training_inputs(
    inputs: &Inputs,
    cfg: &RunConfig,
    toggles: Toggles,
    recalls: Option<&RecallTable>,
) -> Result<(Dataset, Option<SamplingPlan>, Vec<f64>)> {
    let (train_set, plan) = match (toggles.cgs, recalls) {
        (true, Some(r)) => {
            let plan = SamplingPlan::build(&inputs.train, r, cfg.tau, cfg.beta, cfg.seed)?;
            (resample(&inputs.train, &plan)?, Some(plan))
        }
        (true, None) => {
            return Err(crate::error::Error::Config(
                "resampling needs per-predicate recalls".into(),
            ))
        }
        (false, _) => (inputs.train.clone(), None),
    };
    let c = inputs.train.spaces.predicate.len();
    let weights = if toggles.ir {
        info_weights(&count_predicates(&train_set))?.weights
    } else {
        InfoWeights::uniform(c)
    };
    Ok((train_set, plan, weights))
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: String,
    pub toggles: Toggles,
    pub metrics: MetricReport,
    pub final_lr: f64,
    pub train_triples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    /// Resolved configuration in `key = value` form.
    pub config: String,
    pub recalls: Option<Vec<f64>>,
    pub variants: Vec<VariantReport>,
}

impl AblationReport {
    pub fn get(&self, toggles: Toggles) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.toggles == toggles)
    }
}

struct Trained {
    outcome: TrainOutcome,
    train_triples: usize,
}

/// Runs each toggle set. Variants that differ only in refinement share one
/// trained model; sampling recalls come from `recalls` or from a run with no
/// modules enabled.
pub fn ablation(
    inputs: &Inputs,
    cfg: &RunConfig,
    variants: &[Toggles],
    recalls: Option<RecallTable>,
) -> Result<AblationReport> {
    cfg.validate()?;
    let zs = inputs.zero_shot()?;
    let info = inputs.info()?;
    let eval = EvalConfig {
        ks: cfg.ks.clone(),
        subtask: cfg.subtask,
    };

    let mut cache: HashMap<(bool, bool, bool), Trained> = HashMap::new();
    let recalls = match recalls {
        Some(r) => Some(r),
        None if variants.iter().any(|t| t.cgs) => {
            let baseline = fit(&mut cache, inputs, cfg, Toggles::NONE, None)?;
            Some(validation_recalls(
                &baseline.outcome.model,
                inputs,
                cfg.subtask,
            )?)
        }
        None => None,
    };

    let mut reports = Vec::with_capacity(variants.len());
    for &t in variants {
        let trained = fit(&mut cache, inputs, cfg, t, recalls.as_ref())?;
        let mut preds = predict(
            &trained.outcome.model,
            &inputs.test,
            &inputs.objects,
            cfg.subtask,
        );
        if t.fkr {
            preds = refine_dataset(&preds, &inputs.objects, &inputs.predicates, cfg.alpha)?.0;
        }
        let ranked: Vec<_> = preds.iter().map(rank).collect();
        reports.push(VariantReport {
            variant: t.label(),
            toggles: t,
            metrics: evaluate(&ranked, &inputs.test, &zs, &info, &eval)?,
            final_lr: trained.outcome.final_lr,
            train_triples: trained.train_triples,
        });
    }

    Ok(AblationReport {
        config: cfg.to_text(),
        recalls: recalls.map(|r| r.0),
        variants: reports,
    })
}

/// Trains the model for `t` unless one with the same training-side toggles
/// is cached.
fn fit<'a>(
    cache: &'a mut HashMap<(bool, bool, bool), Trained>,
    inputs: &Inputs,
    cfg: &RunConfig,
    t: Toggles,
    recalls: Option<&RecallTable>,
) -> Result<&'a Trained> {
    use std::collections::hash_map::Entry;
    match cache.entry((t.cgs, t.ir, t.jfl)) {
        Entry::Occupied(e) => Ok(e.into_mut()),
        Entry::Vacant(e) => {
            let toggles = Toggles { fkr: false, ..t };
            let (train_set, _, weights) = training_inputs(inputs, cfg, toggles, recalls)?;
            log::info!("training variant {}", toggles.label());
            let outcome = train(
                initial_model(inputs, cfg.seed),
                &train_set,
                Some(&inputs.val),
                &inputs.objects,
                &weights,
                &cfg.train_config(t.jfl),
            )?;
            Ok(e.insert(Trained {
                outcome,
                train_triples: train_set.triple_count(),
            }))
        }
    }
}

/// The four single-module variants, the combined JFL and FKR variant and the
/// baseline.
pub fn standard_variants() -> Vec<Toggles> {
    let n = Toggles::NONE;
    vec![
        n,
        Toggles { cgs: true, ..n },
        Toggles { ir: true, ..n },
        Toggles { fkr: true, ..n },
        Toggles { jfl: true, ..n },
        Toggles {
            jfl: true,
            fkr: true,
            ..n
        },
    ]
}
