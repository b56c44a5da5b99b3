//! Run configuration: flat `key = value` files plus command-line overrides.
//!
//! ```text
//! # comment
//! variant = NPLM
//! d_model = 32
//! train = data/train.txt
//! ```
//!
//! `variant` is required and selects the defaults for every other key.
//! Unknown keys, duplicates, malformed values and variant constraint
//! violations are errors naming the offending line.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{VocabLimit, VocabMode};
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, SweepKind};
use crate::kv::{format_list, parse, parse_list, KeyValue};
use crate::model::{ModelConfig, ModelVariant};
use crate::training::TrainConfig;

/// Gradient-norm ceiling for the NPLM family; Transformers train unclipped.
pub const NPLM_CLIP_NORM: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected valid|test)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub lambada: Option<PathBuf>,
    pub lambada_annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `vocab_size = 0` means "size of the vocabulary built from the data".
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub eval_split: Split,
    pub data: DataPaths,
    pub vocab_mode: VocabMode,
    pub vocab_top_k: Option<usize>,
    pub vocab_min_freq: Option<u64>,
    pub out_dir: PathBuf,
    pub sweep_kind: SweepKind,
    pub sweep_values: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    /// CF bucket: target seen more than this many times in its context.
    pub cf_threshold: usize,
    /// LF bucket: training frequency below this.
    pub lf_threshold: u64,
}

impl RunConfig {
    pub fn for_variant(variant: ModelVariant) -> RunConfig {
        let mut model = ModelConfig::for_variant(variant);
        model.vocab_size = 0;
        let mut train = TrainConfig::default();
        if !variant.is_transformer() {
            train.optimizer.clip_norm = Some(NPLM_CLIP_NORM);
        }
        RunConfig {
            model,
            train,
            eval: EvalConfig::default(),
            eval_split: Split::Valid,
            data: DataPaths::default(),
            vocab_mode: VocabMode::Word,
            vocab_top_k: None,
            vocab_min_freq: None,
            out_dir: PathBuf::from("runs"),
            sweep_kind: SweepKind::ContextLength,
            sweep_values: Vec::new(),
            sweep_seeds: vec![0],
            cf_threshold: 2,
            lf_threshold: 1500,
        }
    }

    pub fn vocab_limit(&self) -> Result<VocabLimit> {
        match (self.vocab_top_k, self.vocab_min_freq) {
            (None, None) => Ok(VocabLimit::None),
            (Some(k), None) => Ok(VocabLimit::TopK(k)),
            (None, Some(f)) => Ok(VocabLimit::MinFreq(f)),
            (Some(_), Some(_)) => Err(Error::Config("vocab_top_k and vocab_min_freq are mutually exclusive".into())),
        }
    }

    /// Model config with the vocabulary size taken from the data when the
    /// config leaves it at 0; a fixed size must match.
    pub fn model_for_vocab(&self, vocab_len: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = vocab_len;
        } else if m.vocab_size != vocab_len {
            return Err(Error::Config(format!(
                "vocab_size = {} but the data vocabulary has {vocab_len} entries",
                m.vocab_size
            )));
        }
        m.validate()?;
        Ok(m)
    }

    /// Checks everything that does not depend on the data. Messages are
    /// returned per violation so callers can attach locations.
    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            // the real size is only known once the data is read
            model.vocab_size = model.adaptive_cutoffs.last().map_or(1, |c| c + 1);
        }
        if let Err(Error::Config(m)) = model.validate() {
            let m = m.strip_prefix("invalid model config: ").unwrap_or(&m);
            out.extend(m.split("; ").map(str::to_string));
        }
        if let Err(e) = self.train.schedule.validate() {
            out.push(e.to_string().trim_start_matches("config error: ").to_string());
        }
        if let Err(e) = self.eval.validate() {
            out.push(e.to_string().trim_start_matches("config error: ").to_string());
        }
        let o = &self.train.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            out.push(format!("beta1 ({}) and beta2 ({}) must lie in [0, 1)", o.beta1, o.beta2));
        }
        if o.eps <= 0.0 {
            out.push(format!("adam_eps ({}) must be positive", o.eps));
        }
        if o.weight_decay < 0.0 {
            out.push(format!("weight_decay ({}) must be non-negative", o.weight_decay));
        }
        if o.clip_norm.is_some_and(|c| c <= 0.0) {
            out.push("clip_norm must be positive or none".into());
        }
        if self.train.batch_size == 0 || self.train.seq_len == 0 {
            out.push("batch_size and seq_len must be positive".into());
        }
        if let Err(e) = self.vocab_limit() {
            out.push(e.to_string().trim_start_matches("config error: ").to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Keys whose values differ from `other`, in canonical order.
    pub fn diff(&self, other: &RunConfig) -> Vec<&'static str> {
        self.pairs()
            .into_iter()
            .zip(other.pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }

    /// Canonical file text; parsing it gives back an equal config.
    pub fn to_config_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn opt_num<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn parse_opt_num<T: FromStr>(key: &str, v: &str) -> std::result::Result<Option<T>, String> {
    match v {
        "none" | "" => Ok(None),
        v => parse(key, v, "a non-negative integer or none").map(Some),
    }
}

fn named(e: Error) -> String {
    match e {
        Error::Config(m) => format!("type error: {m}"),
        e => e.to_string(),
    }
}

impl KeyValue for RunConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mut out = self.model.pairs();
        out.extend(t.schedule.pairs());
        out.extend(t.optimizer.pairs());
        out.extend([
            ("batch_size", t.batch_size.to_string()),
            ("seq_len", t.seq_len.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("log_every", t.log_every.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint", opt_path(&t.checkpoint_path)),
            ("eval_seq_len", self.eval.seq_len.to_string()),
            ("eval_target_len", self.eval.target_len.to_string()),
            ("eval_unit", self.eval.unit.to_string()),
            ("eval_split", self.eval_split.to_string()),
            ("train", opt_path(&self.data.train)),
            ("valid", opt_path(&self.data.valid)),
            ("test", opt_path(&self.data.test)),
            ("lambada", opt_path(&self.data.lambada)),
            ("lambada_annotations", opt_path(&self.data.lambada_annotations)),
            ("vocab_mode", self.vocab_mode.as_str().to_string()),
            ("vocab_top_k", opt_num(self.vocab_top_k)),
            ("vocab_min_freq", opt_num(self.vocab_min_freq)),
            ("out_dir", self.out_dir.display().to_string()),
            ("sweep_kind", self.sweep_kind.to_string()),
            ("sweep_values", format_list(&self.sweep_values)),
            ("sweep_seeds", format_list(&self.sweep_seeds)),
            ("cf_threshold", self.cf_threshold.to_string()),
            ("lf_threshold", self.lf_threshold.to_string()),
        ]);
        out
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        if self.model.set(key, value)? || self.train.schedule.set(key, value)? || self.train.optimizer.set(key, value)? {
            return Ok(true);
        }
        let int = "a non-negative integer";
        match key {
            "batch_size" => self.train.batch_size = parse(key, value, int)?,
            "seq_len" => self.train.seq_len = parse(key, value, int)?,
            "eval_every" => self.train.eval_every = parse(key, value, int)?,
            "log_every" => self.train.log_every = parse(key, value, int)?,
            "seed" => self.train.seed = parse(key, value, int)?,
            "checkpoint" => self.train.checkpoint_path = parse_opt_path(value),
            "eval_seq_len" => self.eval.seq_len = parse(key, value, int)?,
            "eval_target_len" => self.eval.target_len = parse(key, value, int)?,
            "eval_unit" => self.eval.unit = value.parse().map_err(named)?,
            "eval_split" => self.eval_split = value.parse().map_err(named)?,
            "train" => self.data.train = parse_opt_path(value),
            "valid" => self.data.valid = parse_opt_path(value),
            "test" => self.data.test = parse_opt_path(value),
            "lambada" => self.data.lambada = parse_opt_path(value),
            "lambada_annotations" => self.data.lambada_annotations = parse_opt_path(value),
            "vocab_mode" => self.vocab_mode = value.parse().map_err(named)?,
            "vocab_top_k" => self.vocab_top_k = parse_opt_num(key, value)?,
            "vocab_min_freq" => self.vocab_min_freq = parse_opt_num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "sweep_kind" => self.sweep_kind = value.parse().map_err(named)?,
            "sweep_values" => self.sweep_values = parse_list(key, value)?,
            "sweep_seeds" => self.sweep_seeds = parse_list(key, value)?,
            "cf_threshold" => self.cf_threshold = parse(key, value, int)?,
            "lf_threshold" => self.lf_threshold = parse(key, value, int)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Where a setting came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Origin {
    Line(usize),
    Override(usize),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override(n) => write!(f, "override {n}"),
        }
    }
}

fn split_pair(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then(|| (k, v.trim()))
}

/// Parses config text. `source` names the text in error messages;
/// `overrides` are `key=value` strings applied after the file, before
/// validation.
pub fn parse_config_str(text: &str, source: &str, overrides: &[String]) -> Result<RunConfig> {
    let err = |origin: &Origin, msg: String| Error::Config(format!("{source}: {origin}: {msg}"));
    let mut entries: Vec<(Origin, String, String)> = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::Line(i + 1);
        let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = split_pair(line) else {
            return Err(err(&origin, format!("expected \"key = value\", got {line:?}")));
        };
        if let Some(prev) = first_line.insert(k.to_string(), i + 1) {
            return Err(err(&origin, format!("duplicate key {k:?} (first set at line {prev})")));
        }
        entries.push((origin, k.to_string(), v.to_string()));
    }
    for (i, o) in overrides.iter().enumerate() {
        let origin = Origin::Override(i + 1);
        let Some((k, v)) = split_pair(o) else {
            return Err(err(&origin, format!("expected key=value, got {o:?}")));
        };
        entries.push((origin, k.to_string(), v.to_string()));
    }

    let Some((vorigin, _, vtext)) = entries.iter().rev().find(|(_, k, _)| k == "variant") else {
        return Err(Error::Config(format!("{source}: missing required key \"variant\"")));
    };
    let variant: ModelVariant = vtext.parse().map_err(|e: Error| err(vorigin, named(e)))?;
    let mut cfg = RunConfig::for_variant(variant);
    let mut location: HashMap<String, Origin> = HashMap::new();
    for (origin, k, v) in &entries {
        location.insert(k.clone(), origin.clone());
        if k == "variant" {
            continue;
        }
        match cfg.set(k, v) {
            Ok(true) => {}
            Ok(false) => return Err(err(origin, format!("unknown key {k:?}"))),
            Err(m) => return Err(err(origin, m)),
        }
    }

    let violations = cfg.violations();
    if !violations.is_empty() {
        let located: Vec<String> = violations
            .iter()
            .map(|m| {
                let key: String = m.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
                match location.get(&key) {
                    Some(o) => format!("{source}: {o}: {m}"),
                    None => format!("{source}: {m} (default for {variant})"),
                }
            })
            .collect();
        return Err(Error::Config(located.join("; ")));
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string(), overrides)
}

/// Named configs shipped with the workbench.
pub const PRESETS: &[(&str, &str)] = &[
    ("nplm_old", include_str!("../../../../configs/nplm_old.conf")),
    ("nplm16", include_str!("../../../../configs/nplm16.conf")),
    ("nplm16_noresid", include_str!("../../../../configs/nplm16_noresid.conf")),
    ("nplm16_sgd", include_str!("../../../../configs/nplm16_sgd.conf")),
    ("nplm16_noglobal", include_str!("../../../../configs/nplm16_noglobal.conf")),
    ("nplm16_avg", include_str!("../../../../configs/nplm16_avg.conf")),
    ("nplm16_noln", include_str!("../../../../configs/nplm16_noln.conf")),
    ("transformer", include_str!("../../../../configs/transformer.conf")),
    ("transformer_n", include_str!("../../../../configs/transformer_n.conf")),
    ("transformer_c", include_str!("../../../../configs/transformer_c.conf")),
];

/// The ablation presets and the keys each changes relative to `nplm16`.
/// Plain SGD needs a far larger step than Adam, so that row also sets
/// `lr_peak`.
pub const ABLATIONS: &[(&str, &[&str])] = &[
    ("nplm16_noresid", &["use_residual"]),
    ("nplm16_sgd", &["lr_peak", "optimizer"]),
    ("nplm16_noglobal", &["global_mode"]),
    ("nplm16_avg", &["global_mode"]),
    ("nplm16_noln", &["use_layernorm"]),
];

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset {name:?} (available: {})", names.join(", ")))
        })
}

pub fn load_preset(name: &str, overrides: &[String]) -> Result<RunConfig> {
    parse_config_str(preset_text(name)?, &format!("preset {name}"), overrides)
}
