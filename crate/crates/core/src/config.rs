//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. A key may appear more
//! than once in a file only with the same value. Command-line overrides are
//! applied with [`RunConfig::set`] after the file and always win.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cgs::{DEFAULT_BETA, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::fkr::DEFAULT_ALPHA;
use crate::ir::DEFAULT_MU;
use crate::jfl::{TrainConfig, DEFAULT_LR};
use crate::metrics::{Subtask, DEFAULT_KS};
use crate::synth::{files, SynthConfig};

/// Which modules a run enables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
pub struct Toggles {
    pub cgs: bool,
    pub fkr: bool,
    pub ir: bool,
    pub jfl: bool,
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        cgs: false,
        fkr: false,
        ir: false,
        jfl: false,
    };

    /// `none`, or module names joined by `+`, e.g. `jfl+fkr`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Toggles::NONE;
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("baseline") {
            return Ok(t);
        }
        for part in s.split('+') {
            match part.trim().to_ascii_lowercase().as_str() {
                "cgs" => t.cgs = true,
                "fkr" => t.fkr = true,
                "ir" => t.ir = true,
                "jfl" => t.jfl = true,
                other => return Err(Error::Config(format!("unknown module {other:?} in {s:?}"))),
            }
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.cgs, "cgs"),
            (self.ir, "ir"),
            (self.jfl, "jfl"),
            (self.fkr, "fkr"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Directory holding the standard file names; individual paths win.
    pub data: Option<PathBuf>,
    pub objects: Option<PathBuf>,
    pub predicates: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub recalls: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: PathBuf,

    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub mu: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,

    pub use_cgs: bool,
    pub use_fkr: bool,
    pub use_ir: bool,
    pub use_jfl: bool,
    pub subtask: Subtask,
    pub ks: Vec<usize>,
    /// Toggle sets for an ablation grid; empty means the single run above.
    pub variants: Vec<Toggles>,

    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            data: None,
            objects: None,
            predicates: None,
            embeddings: None,
            train: None,
            val: None,
            test: None,
            recalls: None,
            model: None,
            predictions: None,
            out: PathBuf::from("out"),
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
            mu: DEFAULT_MU,
            lr: DEFAULT_LR,
            iterations: train.iterations,
            batch_size: train.batch_size,
            patience: train.patience,
            eval_every: train.eval_every,
            seed: 0,
            use_cgs: false,
            use_fkr: false,
            use_ir: false,
            use_jfl: false,
            subtask: Subtask::PredCls,
            ks: DEFAULT_KS.to_vec(),
            variants: Vec::new(),
            synth: SynthConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn non_empty(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: std::collections::HashMap<String, (usize, String)> = Default::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some((line_no, prev)) = seen.get(key) {
                if prev != value {
                    return Err(Error::Config(format!(
                        "line {}: {key} = {value} conflicts with {key} = {prev} on line {line_no}",
                        i + 1
                    )));
                }
            }
            seen.insert(key.to_string(), (i + 1, value.to_string()));
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        match key {
            "data" => self.data = non_empty(value),
            "objects" => self.objects = non_empty(value),
            "predicates" => self.predicates = non_empty(value),
            "embeddings" => self.embeddings = non_empty(value),
            "train" => self.train = non_empty(value),
            "val" => self.val = non_empty(value),
            "test" => self.test = non_empty(value),
            "recalls" => self.recalls = non_empty(value),
            "model" => self.model = non_empty(value),
            "predictions" => self.predictions = non_empty(value),
            "out" => self.out = PathBuf::from(value),
            "alpha" => self.alpha = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "mu" => self.mu = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "use_cgs" => self.use_cgs = parse_bool(key, value)?,
            "use_fkr" => self.use_fkr = parse_bool(key, value)?,
            "use_ir" => self.use_ir = parse_bool(key, value)?,
            "use_jfl" => self.use_jfl = parse_bool(key, value)?,
            "subtask" => self.subtask = value.parse().map_err(Error::Config)?,
            "ks" => {
                self.ks = value
                    .split(',')
                    .map(|k| parse_num(key, k.trim()))
                    .collect::<Result<_>>()?;
            }
            "variants" => {
                self.variants = value
                    .split(',')
                    .filter(|v| !v.trim().is_empty())
                    .map(Toggles::parse)
                    .collect::<Result<_>>()?;
            }
            "synth.c_obj" => s.c_obj = parse_num(key, value)?,
            "synth.c_pred" => s.c_pred = parse_num(key, value)?,
            "synth.d_roi" => s.d_roi = parse_num(key, value)?,
            "synth.d_emb" => s.d_emb = parse_num(key, value)?,
            "synth.images" => s.images = parse_num(key, value)?,
            "synth.zipf_s" => s.zipf_s = parse_num(key, value)?,
            "synth.zero_shot_fraction" => s.zero_shot_fraction = parse_num(key, value)?,
            "synth.noise_sigma" => s.noise_sigma = parse_num(key, value)?,
            "synth.triples_per_image" => s.triples_per_image = parse_num(key, value)?,
            "synth.max_objects" => s.max_objects = parse_num(key, value)?,
            "synth.reuse" => s.reuse = parse_num(key, value)?,
            "synth.predicate_spacing" => s.predicate_spacing = parse_num(key, value)?,
            "synth.label_offset" => s.label_offset = parse_num(key, value)?,
            "synth.val_fraction" => s.val_fraction = parse_num(key, value)?,
            "synth.test_fraction" => s.test_fraction = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} must lie in [0, 1]",
                self.alpha
            )));
        }
        if !(self.tau > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("tau and beta must be positive".into()));
        }
        if !(self.mu >= 0.0 && self.lr >= 0.0) {
            return Err(Error::Config("mu and lr must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must list positive values".into()));
        }
        Ok(())
    }

    /// Toggles of the single configured run.
    pub fn toggles(&self) -> Toggles {
        Toggles {
            cgs: self.use_cgs,
            fkr: self.use_fkr,
            ir: self.use_ir,
            jfl: self.use_jfl,
        }
    }

    pub fn train_config(&self, use_jfl: bool) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            iterations: self.iterations,
            batch_size: self.batch_size,
            patience: self.patience,
            eval_every: self.eval_every,
            seed: self.seed,
            mu: self.mu,
            use_jfl,
        }
    }

    fn resolve(&self, explicit: &Option<PathBuf>, name: &str, key: &str) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.clone());
        }
        match &self.data {
            Some(dir) => Ok(dir.join(name)),
            None => Err(Error::Config(format!(
                "no path for {key}: set `{key}` or `data`"
            ))),
        }
    }

    pub fn objects_path(&self) -> Result<PathBuf> {
        self.resolve(&self.objects, files::OBJECTS, "objects")
    }
    pub fn predicates_path(&self) -> Result<PathBuf> {
        self.resolve(&self.predicates, files::PREDICATES, "predicates")
    }
    pub fn embeddings_path(&self) -> Result<PathBuf> {
        self.resolve(&self.embeddings, files::EMBEDDINGS, "embeddings")
    }
    pub fn train_path(&self) -> Result<PathBuf> {
        self.resolve(&self.train, files::TRAIN, "train")
    }
    pub fn val_path(&self) -> Result<PathBuf> {
        self.resolve(&self.val, files::VAL, "val")
    }
    pub fn test_path(&self) -> Result<PathBuf> {
        self.resolve(&self.test, files::TEST, "test")
    }

    /// Fully resolved configuration in the same `key = value` form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let s = &self.synth;
        let ks: Vec<String> = self.ks.iter().map(usize::to_string).collect();
        let variants: Vec<String> = self.variants.iter().map(Toggles::label).collect();
        let entries: Vec<(&str, String)> = vec![
            ("data", path(&self.data)),
            ("objects", path(&self.objects)),
            ("predicates", path(&self.predicates)),
            ("embeddings", path(&self.embeddings)),
            ("train", path(&self.train)),
            ("val", path(&self.val)),
            ("test", path(&self.test)),
            ("recalls", path(&self.recalls)),
            ("model", path(&self.model)),
            ("predictions", path(&self.predictions)),
            ("out", self.out.display().to_string()),
            ("alpha", self.alpha.to_string()),
            ("tau", self.tau.to_string()),
            ("beta", self.beta.to_string()),
            ("mu", self.mu.to_string()),
            ("lr", self.lr.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patience", self.patience.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
            ("use_cgs", self.use_cgs.to_string()),
            ("use_fkr", self.use_fkr.to_string()),
            ("use_ir", self.use_ir.to_string()),
            ("use_jfl", self.use_jfl.to_string()),
            ("subtask", self.subtask.to_string()),
            ("ks", ks.join(",")),
            ("variants", variants.join(",")),
            ("synth.c_obj", s.c_obj.to_string()),
            ("synth.c_pred", s.c_pred.to_string()),
            ("synth.d_roi", s.d_roi.to_string()),
            ("synth.d_emb", s.d_emb.to_string()),
            ("synth.images", s.images.to_string()),
            ("synth.zipf_s", s.zipf_s.to_string()),
            ("synth.zero_shot_fraction", s.zero_shot_fraction.to_string()),
            ("synth.noise_sigma", s.noise_sigma.to_string()),
            ("synth.triples_per_image", s.triples_per_image.to_string()),
            ("synth.max_objects", s.max_objects.to_string()),
            ("synth.reuse", s.reuse.to_string()),
            ("synth.predicate_spacing", s.predicate_spacing.to_string()),
            ("synth.label_offset", s.label_offset.to_string()),
            ("synth.val_fraction", s.val_fraction.to_string()),
            ("synth.test_fraction", s.test_fraction.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
