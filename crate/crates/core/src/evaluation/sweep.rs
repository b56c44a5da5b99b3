use std::fmt;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;

use super::{score_corpus, EvalConfig};
use crate::error::{Error, Result};
use crate::layers::GlobalMode;
use crate::model::{build_model, ModelConfig, ModelVariant};
use crate::training::{train_loop, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepKind {
    /// NPLM window `k`, or Transformer prefix length.
    ContextLength,
    /// Layer-0 attention window of Transformer-C.
    L0Window,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::ContextLength => "context_length",
            SweepKind::L0Window => "l0_window",
        }
    }

    /// Column header of the swept value.
    pub fn column(self) -> &'static str {
        match self {
            SweepKind::ContextLength => "k",
            SweepKind::L0Window => "l0_window",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context_length" => Ok(SweepKind::ContextLength),
            "l0_window" => Ok(SweepKind::L0Window),
            other => Err(Error::Config(format!(
                "unknown sweep kind {other:?} (expected context_length|l0_window)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub variant: ModelVariant,
    pub kind: SweepKind,
    pub value: usize,
    pub seed: u64,
    pub valid_ppl: f64,
}

/// Configs of one sweep cell. Every cell trains from scratch.
///
/// Context length: NPLM-family models get window `k` with the global
/// context switched off, so the model sees exactly `k` tokens; Transformers
/// train on length-`k` sequences and are scored with length-`k` blocks
/// whose second half is scored.
pub fn cell_configs(spec: &SweepSpec, value: usize, seed: u64) -> Result<(ModelConfig, TrainConfig, EvalConfig)> {
    if value == 0 {
        return Err(Error::Config(format!("{} values must be positive", spec.kind)));
    }
    let mut model = spec.model.clone();
    let mut train = spec.train.clone();
    let mut eval = spec.eval;
    train.seed = seed;
    train.eval_every = 0;
    train.checkpoint_path = None;
    match spec.kind {
        SweepKind::ContextLength => {
            if model.variant.is_transformer() {
                train.seq_len = value;
                eval.seq_len = value;
                eval.target_len = value.div_ceil(2);
            } else {
                model.k_concat = value;
                model.global_mode = GlobalMode::Disabled;
            }
        }
        SweepKind::L0Window => {
            if model.variant != ModelVariant::TransformerC {
                return Err(Error::Config(format!(
                    "l0_window sweeps need variant TRANSFORMER_C, got {}",
                    model.variant
                )));
            }
            model.l0_window = value;
        }
    }
    model.validate()?;
    eval.validate()?;
    Ok((model, train, eval))
}

fn run_cell(spec: &SweepSpec, value: usize, seed: u64, train_ids: &[usize], valid_ids: &[usize]) -> Result<SweepRow> {
    let (model_cfg, train_cfg, eval_cfg) = cell_configs(spec, value, seed)?;
    let model = build_model::<f32>(&model_cfg, seed)?;
    let state = TrainState::new(model, &train_cfg)?;
    let state = train_loop(&train_cfg, state, train_ids, &[], &mut |_| {})?;
    let report = score_corpus(&state.model, valid_ids, &eval_cfg)?;
    info!(
        "sweep {}={value} seed={seed}: valid ppl {:.4}",
        spec.kind.column(),
        report.ppl
    );
    Ok(SweepRow {
        variant: model_cfg.variant,
        kind: spec.kind,
        value,
        seed,
        valid_ppl: report.ppl,
    })
}

/// One row per `(value, seed)`, in value-major order. Cells run in
/// parallel; each is deterministic, so the table is too.
pub fn run_sweep(spec: &SweepSpec, train_ids: &[usize], valid_ids: &[usize]) -> Result<Vec<SweepRow>> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    let cells: Vec<(usize, u64)> = spec
        .values
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(value, seed)| {
            run_cell(spec, value, seed, train_ids, valid_ids).map_err(|e| Error::Sweep {
                key: spec.kind.column(),
                value,
                seed,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Columns `variant`, `k` (or `l0_window`), `seed`, `valid_ppl`.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let column = rows.first().map_or("k", |r| r.kind.column());
    let mut out = format!("variant\t{column}\tseed\tvalid_ppl\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.variant, r.value, r.seed, r.valid_ppl));
    }
    out
}
