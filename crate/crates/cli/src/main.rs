use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sgrel::cgs::{count_predicates, resample, SamplingPlan};
use sgrel::config::RunConfig;
use sgrel::fkr::refine_dataset;
use sgrel::ingest::{
    build_zero_shot_index, load_embeddings, load_recalls, write_annotations, write_recalls,
    write_zero_shot_index,
};
use sgrel::ir::{info_weights, weight_records, InfoWeights};
use sgrel::jfl::{train, write_loss_history, RelationModel};
use sgrel::metrics::{evaluate, write_per_predicate_csv, EvalConfig, MetricReport};
use sgrel::pipeline::{ablation, load_inputs, load_spaces, load_split, predict, AblationReport};
use sgrel::predict::{load_predictions, rank, write_predictions};
use sgrel::synth::{generate, write_synth};
use sgrel::{Error, Split};

#[derive(Parser)]
#[command(
    name = "sgrel",
    version,
    about = "Scene graph relation prediction pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory with the standard input file names.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    mu: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Any other configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Validate inputs and summarize them.
    Ingest,
    /// Write the zero-shot signature index of test against train.
    Zsplit,
    /// Down-sample head predicates of the training split.
    Resample,
    /// Write per-predicate information weights.
    Weights,
    /// Train the relation model.
    Train,
    /// Predict on test and optionally refine with label semantics.
    Refine,
    /// Score predictions on test.
    Eval,
    /// Run the full pipeline, or an ablation grid when `variants` is set.
    Report,
}

/// Misuse of the command line or configuration.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags: [(&str, Option<String>); 8] = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        (
            "data",
            common.data.as_ref().map(|p| p.display().to_string()),
        ),
        ("alpha", common.alpha.map(|v| v.to_string())),
        ("tau", common.tau.map(|v| v.to_string())),
        ("beta", common.beta.map(|v| v.to_string())),
        ("mu", common.mu.map(|v| v.to_string())),
        ("lr", common.lr.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.synth.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn print_report(name: &str, r: &MetricReport) {
    for m in &r.per_k {
        println!(
            "{name} {} K={}: R={} mR={} zR={} mRIC={}",
            r.subtask,
            m.k,
            fmt_metric(m.recall),
            fmt_metric(m.mean_recall),
            fmt_metric(m.zero_shot_recall),
            fmt_metric(m.mric)
        );
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let data = generate(&cfg.synth)?;
    write_synth(out, &data)?;
    fs::write(out.join("synth_config.txt"), cfg.to_text())?;
    println!(
        "wrote {} train, {} val, {} test images and {} withheld signatures to {}",
        data.train.annotations.len(),
        data.val.annotations.len(),
        data.test.annotations.len(),
        data.map.withheld.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let out = out_dir(cfg)?;
    let split = |d: &sgrel::Dataset| {
        json!({
            "images": d.annotations.len(),
            "objects": d.annotations.iter().map(|a| a.objects.len()).sum::<usize>(),
            "triples": d.triple_count(),
        })
    };
    let counts: Vec<_> = inputs
        .train
        .spaces
        .predicate
        .names()
        .iter()
        .zip(count_predicates(&inputs.train))
        .map(|(n, c)| json!({ "name": n, "count": c }))
        .collect();
    let summary = json!({
        "config": cfg.to_text(),
        "d_roi": inputs.train.d_roi,
        "d_emb": inputs.objects.dim,
        "train": split(&inputs.train),
        "val": split(&inputs.val),
        "test": split(&inputs.test),
        "train_predicate_counts": counts,
    });
    write_json(&out.join("ingest_summary.json"), &summary)?;
    println!(
        "train {} / val {} / test {} images, {} train triples",
        inputs.train.annotations.len(),
        inputs.val.annotations.len(),
        inputs.test.annotations.len(),
        inputs.train.triple_count()
    );
    Ok(())
}

fn cmd_zsplit(cfg: &RunConfig) -> Result<()> {
    let spaces = load_spaces(cfg)?;
    let train_set = load_split(cfg.train_path()?, Split::Train, &spaces)?;
    let test = load_split(cfg.test_path()?, Split::Test, &spaces)?;
    let zs = build_zero_shot_index(&train_set, &test)?;
    let out = out_dir(cfg)?;
    write_zero_shot_index(out.join("zero_shot.json"), &zs, &spaces)?;
    println!("{} zero-shot signatures", zs.len());
    Ok(())
}

fn cmd_resample(cfg: &RunConfig) -> Result<()> {
    let spaces = load_spaces(cfg)?;
    let train_set = load_split(cfg.train_path()?, Split::Train, &spaces)?;
    let plan = if cfg.use_cgs {
        let Some(path) = &cfg.recalls else {
            bail!(Usage(
                "use_cgs needs `recalls`, a per-predicate recall file (see `eval`)".into()
            ));
        };
        let recalls = load_recalls(path, &spaces.predicate)?;
        SamplingPlan::build(&train_set, &recalls, cfg.tau, cfg.beta, cfg.seed)?
    } else {
        SamplingPlan::identity(&train_set, cfg.seed)
    };
    let resampled = resample(&train_set, &plan)?;
    let out = out_dir(cfg)?;
    write_annotations(out.join("train_resampled.jsonl"), &resampled)?;
    write_json(
        &out.join("sampling_plan.json"),
        &json!({ "config": cfg.to_text(), "predicates": plan.records(&spaces.predicate) }),
    )?;
    println!(
        "kept {} of {} triples",
        resampled.triple_count(),
        train_set.triple_count()
    );
    Ok(())
}

fn cmd_weights(cfg: &RunConfig) -> Result<()> {
    let spaces = load_spaces(cfg)?;
    let train_set = load_split(cfg.train_path()?, Split::Train, &spaces)?;
    let w = info_weights(&count_predicates(&train_set))?;
    let out = out_dir(cfg)?;
    write_json(
        &out.join("weights.json"),
        &json!({ "config": cfg.to_text(), "predicates": weight_records(&w, &spaces.predicate) }),
    )?;
    println!("weights for {} predicates", w.weights.len());
    Ok(())
}

fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.model
        .clone()
        .unwrap_or_else(|| cfg.out.join("model.json"))
}

fn predictions_path(cfg: &RunConfig) -> PathBuf {
    cfg.predictions
        .clone()
        .unwrap_or_else(|| cfg.out.join("predictions.jsonl"))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let spaces = load_spaces(cfg)?;
    let train_set = load_split(cfg.train_path()?, Split::Train, &spaces)?;
    let val = load_split(cfg.val_path()?, Split::Val, &spaces)?;
    let objects = load_embeddings(cfg.embeddings_path()?, &spaces.object)?;
    let weights = if cfg.use_ir {
        info_weights(&count_predicates(&train_set))?.weights
    } else {
        InfoWeights::uniform(spaces.predicate.len())
    };
    let model = RelationModel::init(
        train_set.d_roi,
        objects.dim,
        spaces.predicate.len(),
        &mut sgrel::rng::substream(cfg.seed, sgrel::rng::INIT),
    );
    let outcome = train(
        model,
        &train_set,
        Some(&val),
        &objects,
        &weights,
        &cfg.train_config(cfg.use_jfl),
    )?;
    let out = out_dir(cfg)?;
    outcome.model.save(out.join("model.json"))?;
    write_loss_history(out.join("loss_history.csv"), &outcome.history)?;
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "config": cfg.to_text(),
            "final_lr": outcome.final_lr,
            "validation_mean_recall_at_50": outcome.validation,
        }),
    )?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{} iterations, final batch loss {:.6}",
            outcome.history.len(),
            last.total
        );
    }
    Ok(())
}

fn cmd_refine(cfg: &RunConfig) -> Result<()> {
    let spaces = load_spaces(cfg)?;
    let test = load_split(cfg.test_path()?, Split::Test, &spaces)?;
    let embeddings = cfg.embeddings_path()?;
    let objects = load_embeddings(&embeddings, &spaces.object)?;
    let predicates = load_embeddings(&embeddings, &spaces.predicate)?;
    let preds = match &cfg.predictions {
        Some(p) => load_predictions(p, spaces.predicate.len())?,
        None => {
            let path = model_path(cfg);
            let model = RelationModel::load(&path)?;
            predict(&model, &test, &objects, cfg.subtask)
        }
    };
    let out = out_dir(cfg)?;
    let preds = if cfg.use_fkr {
        let (refined, records) = refine_dataset(&preds, &objects, &predicates, cfg.alpha)?;
        let text: String = records
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<std::result::Result<_, _>>()?;
        fs::write(out.join("refinement.jsonl"), text)?;
        let flipped = records.iter().filter(|r| r.pre_top != r.post_top).count();
        println!(
            "refined {} pairs, {} changed their top predicate",
            records.len(),
            flipped
        );
        refined
    } else {
        preds
    };
    write_predictions(out.join("predictions.jsonl"), &preds)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let spaces = load_spaces(cfg)?;
    let train_set = load_split(cfg.train_path()?, Split::Train, &spaces)?;
    let test = load_split(cfg.test_path()?, Split::Test, &spaces)?;
    let preds = load_predictions(predictions_path(cfg), spaces.predicate.len())?;
    let ranked: Vec<_> = preds.iter().map(rank).collect();
    let zs = build_zero_shot_index(&train_set, &test)?;
    let info = info_weights(&count_predicates(&train_set))?;
    let eval = EvalConfig {
        ks: cfg.ks.clone(),
        subtask: cfg.subtask,
    };
    let report = evaluate(&ranked, &test, &zs, &info, &eval)?;
    let out = out_dir(cfg)?;
    write_json(
        &out.join("report.json"),
        &json!({ "config": cfg.to_text(), "metrics": report }),
    )?;
    write_per_predicate_csv(out.join("per_predicate.csv"), &report)?;
    let k = if cfg.ks.contains(&sgrel::pipeline::RECALL_K) {
        sgrel::pipeline::RECALL_K
    } else {
        *cfg.ks.iter().max().expect("ks is non-empty")
    };
    write_recalls(
        out.join("recalls.json"),
        &report.recall_table(k).expect("k is listed"),
        &spaces.predicate,
    )?;
    print_report("eval", &report);
    Ok(())
}

fn ablation_csv(report: &AblationReport) -> String {
    let Some(first) = report.variants.first() else {
        return String::new();
    };
    let ks: Vec<usize> = first.metrics.per_k.iter().map(|m| m.k).collect();
    let mut header = vec!["variant".to_string()];
    for family in ["R", "mR", "zR", "mRIC"] {
        header.extend(ks.iter().map(|k| format!("{family}@{k}")));
    }
    let mut out = header.join(",") + "\n";
    for v in &report.variants {
        let mut row = vec![v.variant.clone()];
        let cell = |x: Option<f64>| x.map(|x| x.to_string()).unwrap_or_default();
        row.extend(v.metrics.per_k.iter().map(|m| cell(m.recall)));
        row.extend(v.metrics.per_k.iter().map(|m| cell(m.mean_recall)));
        row.extend(v.metrics.per_k.iter().map(|m| cell(m.zero_shot_recall)));
        row.extend(v.metrics.per_k.iter().map(|m| cell(m.mric)));
        out += &(row.join(",") + "\n");
    }
    out
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let variants = if cfg.variants.is_empty() {
        vec![cfg.toggles()]
    } else {
        cfg.variants.clone()
    };
    let recalls = match &cfg.recalls {
        Some(p) => Some(load_recalls(p, &inputs.train.spaces.predicate)?),
        None => None,
    };
    let report = ablation(&inputs, cfg, &variants, recalls)?;
    let out = out_dir(cfg)?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("ablation.csv"), ablation_csv(&report))?;
    for v in &report.variants {
        print_report(&v.variant, &v.metrics);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Ingest => cmd_ingest(&cfg),
        Command::Zsplit => cmd_zsplit(&cfg),
        Command::Resample => cmd_resample(&cfg),
        Command::Weights => cmd_weights(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Refine => cmd_refine(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Report => cmd_report(&cfg),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some()
            || matches!(c.downcast_ref::<Error>(), Some(Error::Config(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}
