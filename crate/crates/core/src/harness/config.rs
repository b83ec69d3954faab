//! Flat `key=value` experiment configuration.
//!
//! One setting per line, `#` starts a comment. Every key except `kind` has a
//! default; unknown keys are rejected so typos surface as errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::LongTailSpec;
use crate::error::{Error, Result};
use crate::stats::CountMode;
use crate::theory::Tolerances;
use crate::trainer::{ClassifierConfig, LabelProposal, TrainerConfig};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// whitespace around keys and values is trimmed. Duplicate keys are an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse(format!("line {}: expected key=value, got `{line}`", lineno + 1)));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::config(key, "duplicate key"));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Train,
    Baseline,
    FixedStats,
    Theory,
    ClassifierSweep,
    BetaAblation,
    CycleLengthSweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Train,
        ExperimentKind::Baseline,
        ExperimentKind::FixedStats,
        ExperimentKind::Theory,
        ExperimentKind::ClassifierSweep,
        ExperimentKind::BetaAblation,
        ExperimentKind::CycleLengthSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Baseline => "baseline",
            ExperimentKind::FixedStats => "fixed-stats",
            ExperimentKind::Theory => "theory",
            ExperimentKind::ClassifierSweep => "classifier-sweep",
            ExperimentKind::BetaAblation => "beta-ablation",
            ExperimentKind::CycleLengthSweep => "cycle-length",
        }
    }

    pub fn is_sweep(self) -> bool {
        matches!(
            self,
            ExperimentKind::ClassifierSweep | ExperimentKind::BetaAblation | ExperimentKind::CycleLengthSweep
        )
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                Error::config("kind", format!("unknown kind `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryConfig {
    pub trials: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub tolerances: Tolerances,
    pub probes: usize,
    /// Balancing-direction assertions; switched off automatically for `K = 2`.
    pub check_direction: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            trials: 1000,
            k_min: 3,
            k_max: 50,
            tolerances: Tolerances::default(),
            probes: 200,
            check_direction: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub data: LongTailSpec,
    pub test_per_class: usize,
    /// Imbalance ratio of the in-loop classifier's training set. Equal to
    /// `data.rho` unless overridden.
    pub clf_rho: f64,
    pub classifier: ClassifierConfig,
    pub trainer: TrainerConfig,
    pub eval_samples: usize,
    pub seeds: Vec<u64>,
    /// Fixed-statistics runs: large and small values for class 0.
    pub fixed_big: f64,
    pub fixed_small: f64,
    pub control_seeds: usize,
    pub sweep_values: Option<Vec<String>>,
    pub kl_threshold: f64,
    pub tail_accuracy_min: f64,
    pub theory: TheoryConfig,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        let data = LongTailSpec::default();
        ExperimentConfig {
            kind,
            clf_rho: data.rho,
            data,
            test_per_class: 250,
            classifier: ClassifierConfig::default(),
            trainer: TrainerConfig::default(),
            eval_samples: 2000,
            seeds: vec![0],
            fixed_big: 1e6,
            fixed_small: 1e-6,
            control_seeds: 5,
            sweep_values: None,
            kl_threshold: 0.10,
            tail_accuracy_min: 0.6,
            theory: TheoryConfig::default(),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let kind: ExperimentKind = kv
            .get("kind")
            .ok_or_else(|| Error::config("kind", "required key is missing"))?
            .parse()?;
        let mut cfg = ExperimentConfig::new(kind);
        let mut clf_rho_set = false;
        for (key, value) in &kv {
            cfg.set(key, value)?;
            clf_rho_set |= key == "clf_rho";
        }
        if !clf_rho_set {
            cfg.clf_rho = cfg.data.rho;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.trainer;
        match key {
            "kind" => self.kind = value.parse()?,
            "classes" => self.data.classes = num(key, value)?,
            "rho" => self.data.rho = num(key, value)?,
            "n_max" => self.data.n_max = num(key, value)?,
            "dim" => self.data.dim = num(key, value)?,
            "radius" => self.data.radius = num(key, value)?,
            "std" => self.data.std = num(key, value)?,
            "data_seed" => self.data.seed = num(key, value)?,
            "test_per_class" => self.test_per_class = num(key, value)?,
            "clf_rho" => self.clf_rho = num(key, value)?,
            "clf_hidden" => self.classifier.hidden = num(key, value)?,
            "clf_epochs" => self.classifier.epochs = num(key, value)?,
            "clf_lr" => self.classifier.lr = num(key, value)?,
            "clf_batch_size" => self.classifier.batch_size = num(key, value)?,
            "noise_dim" => t.noise_dim = num(key, value)?,
            "hidden" => t.hidden = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "iterations" => t.iterations = num(key, value)?,
            "lr_g" => t.lr_g = num(key, value)?,
            "lr_d" => t.lr_d = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "alpha" => t.alpha = num(key, value)?,
            "beta" => t.beta = num(key, value)?,
            "cycle_len" => t.cycle_len = num(key, value)?,
            "ema_decay" => t.ema_decay = num(key, value)?,
            "ema_start" => t.ema_start = optional(key, value)?,
            "seed" => {
                t.seed = num(key, value)?;
                self.seeds = vec![t.seed];
            }
            "seeds" => self.seeds = list(key, value)?,
            "label_proposal" => {
                t.label_proposal = match value {
                    "uniform" => LabelProposal::Uniform,
                    "inverse-frequency" => LabelProposal::InverseFrequency,
                    _ => return Err(Error::config(key, format!("expected uniform or inverse-frequency, got `{value}`"))),
                }
            }
            "count_mode" => {
                t.count_mode = match value {
                    "argmax" => CountMode::Argmax,
                    "soft" => CountMode::Soft,
                    _ => return Err(Error::config(key, format!("expected argmax or soft, got `{value}`"))),
                }
            }
            "reg_warmup" => t.reg_warmup = num(key, value)?,
            "fixed_n_hat" => {
                t.fixed_n_hat = if value == "none" { None } else { Some(list(key, value)?) }
            }
            "eval_samples" => self.eval_samples = num(key, value)?,
            "fixed_big" => self.fixed_big = num(key, value)?,
            "fixed_small" => self.fixed_small = num(key, value)?,
            "control_seeds" => self.control_seeds = num(key, value)?,
            "sweep_values" => {
                self.sweep_values = if value == "none" {
                    None
                } else {
                    Some(value.split(',').map(|s| s.trim().to_string()).collect())
                }
            }
            "kl_threshold" => self.kl_threshold = num(key, value)?,
            "tail_accuracy_min" => self.tail_accuracy_min = num(key, value)?,
            "trials" => self.theory.trials = num(key, value)?,
            "k_min" => self.theory.k_min = num(key, value)?,
            "k_max" => self.theory.k_max = num(key, value)?,
            "tol_bound" => self.theory.tolerances.bound = num(key, value)?,
            "tol_value" => self.theory.tolerances.value = num(key, value)?,
            "tol_oracle" => self.theory.tolerances.oracle = num(key, value)?,
            "probes" => self.theory.probes = num(key, value)?,
            "check_direction" => self.theory.check_direction = num(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Overrides the seed (and the seed list) everywhere.
    pub fn set_seed(&mut self, seed: u64) {
        self.trainer.seed = seed;
        self.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(as_config)?;
        if self.test_per_class == 0 {
            return Err(Error::config("test_per_class", "must be >= 1"));
        }
        if !(self.clf_rho >= 1.0 && self.clf_rho.is_finite()) {
            return Err(Error::config("clf_rho", format!("must be >= 1, got {}", self.clf_rho)));
        }
        LongTailSpec {
            rho: self.clf_rho,
            ..self.data.clone()
        }
        .validate()
        .map_err(|e| Error::config("clf_rho", e.to_string()))?;
        if self.classifier.hidden == 0 || self.classifier.batch_size == 0 {
            return Err(Error::config("clf_hidden", "classifier sizes must be >= 1"));
        }
        if !(self.classifier.lr > 0.0) {
            return Err(Error::config("clf_lr", "must be > 0"));
        }
        self.trainer.validate()?;
        if let Some(n) = &self.trainer.fixed_n_hat {
            if n.len() != self.data.classes {
                return Err(Error::config("fixed_n_hat", format!("needs {} entries, got {}", self.data.classes, n.len())));
            }
        }
        if self.eval_samples <= self.data.dim {
            return Err(Error::config("eval_samples", "must exceed the data dimension"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if !(self.fixed_big > 0.0) || !(self.fixed_small > 0.0) {
            return Err(Error::config("fixed_big", "fixed statistics must be > 0"));
        }
        if self.kind == ExperimentKind::FixedStats {
            let t = &self.trainer;
            if t.reg_warmup == 0 || !t.reg_warmup.is_multiple_of(t.cycle_len) || t.reg_warmup >= t.iterations {
                return Err(Error::config(
                    "reg_warmup",
                    "fixed-stats runs need a warm-up that is a positive multiple of cycle_len and shorter than the run",
                ));
            }
            if self.control_seeds < 2 {
                return Err(Error::config("control_seeds", "need at least 2 control seeds for a noise band"));
            }
        }
        if let Some(v) = &self.sweep_values {
            if v.is_empty() || v.iter().any(|s| s.is_empty()) {
                return Err(Error::config("sweep_values", "empty sweep value"));
            }
        }
        let th = &self.theory;
        if th.trials == 0 {
            return Err(Error::config("trials", "must be >= 1"));
        }
        if th.k_min < 2 || th.k_max < th.k_min {
            return Err(Error::config("k_min", format!("need 2 <= k_min <= k_max, got {}..={}", th.k_min, th.k_max)));
        }
        for (key, v) in [
            ("tol_bound", th.tolerances.bound),
            ("tol_value", th.tolerances.value),
            ("tol_oracle", th.tolerances.oracle),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(key, "must be >= 0"));
            }
        }
        Ok(())
    }

    /// Canonical text form: every key, sorted, with round-trip number
    /// formatting. Parsing it back yields the same config.
    pub fn to_text(&self) -> String {
        let t = &self.trainer;
        let th = &self.theory;
        let join = |v: &[String]| v.join(",");
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("kind", self.kind.name().into());
        kv.insert("classes", self.data.classes.to_string());
        kv.insert("rho", f(self.data.rho));
        kv.insert("n_max", self.data.n_max.to_string());
        kv.insert("dim", self.data.dim.to_string());
        kv.insert("radius", f(self.data.radius));
        kv.insert("std", f(self.data.std));
        kv.insert("data_seed", self.data.seed.to_string());
        kv.insert("test_per_class", self.test_per_class.to_string());
        kv.insert("clf_rho", f(self.clf_rho));
        kv.insert("clf_hidden", self.classifier.hidden.to_string());
        kv.insert("clf_epochs", self.classifier.epochs.to_string());
        kv.insert("clf_lr", f(self.classifier.lr));
        kv.insert("clf_batch_size", self.classifier.batch_size.to_string());
        kv.insert("noise_dim", t.noise_dim.to_string());
        kv.insert("hidden", t.hidden.to_string());
        kv.insert("batch_size", t.batch_size.to_string());
        kv.insert("iterations", t.iterations.to_string());
        kv.insert("lr_g", f(t.lr_g));
        kv.insert("lr_d", f(t.lr_d));
        kv.insert("beta1", f(t.beta1));
        kv.insert("beta2", f(t.beta2));
        kv.insert("lambda", f(t.lambda));
        kv.insert("alpha", f(t.alpha));
        kv.insert("beta", f(t.beta));
        kv.insert("cycle_len", t.cycle_len.to_string());
        kv.insert("ema_decay", f(t.ema_decay));
        kv.insert("ema_start", t.ema_start.map_or("none".into(), |s| s.to_string()));
        kv.insert("seed", t.seed.to_string());
        kv.insert("seeds", join(&self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>()));
        kv.insert("label_proposal", t.label_proposal.name().into());
        kv.insert(
            "count_mode",
            match t.count_mode {
                CountMode::Argmax => "argmax",
                CountMode::Soft => "soft",
            }
            .into(),
        );
        kv.insert("reg_warmup", t.reg_warmup.to_string());
        kv.insert(
            "fixed_n_hat",
            t.fixed_n_hat
                .as_ref()
                .map_or("none".into(), |v| join(&v.iter().map(|x| f(*x)).collect::<Vec<_>>())),
        );
        kv.insert("eval_samples", self.eval_samples.to_string());
        kv.insert("fixed_big", f(self.fixed_big));
        kv.insert("fixed_small", f(self.fixed_small));
        kv.insert("control_seeds", self.control_seeds.to_string());
        kv.insert("sweep_values", self.sweep_values.as_ref().map_or("none".into(), |v| join(v)));
        kv.insert("kl_threshold", f(self.kl_threshold));
        kv.insert("tail_accuracy_min", f(self.tail_accuracy_min));
        kv.insert("trials", th.trials.to_string());
        kv.insert("k_min", th.k_min.to_string());
        kv.insert("k_max", th.k_max.to_string());
        kv.insert("tol_bound", f(th.tolerances.bound));
        kv.insert("tol_value", f(th.tolerances.value));
        kv.insert("tol_oracle", f(th.tolerances.oracle));
        kv.insert("probes", th.probes.to_string());
        kv.insert("check_direction", th.check_direction.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            writeln!(out, "{k}={v}").expect("write to string");
        }
        out
    }

    /// SHA-256 of [`to_text`](Self::to_text), hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|s| num(key, s.trim())).collect()
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidParam { name, reason } => Error::config(data_key(name), reason),
        other => other,
    }
}

fn data_key(name: &str) -> &str {
    match name {
        "seed" => "data_seed",
        other => other,
    }
}
