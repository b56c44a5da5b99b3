//! Perplexity/bpc scoring, target-word accuracy and sweeps.

mod accuracy;
mod sweep;

pub use accuracy::{
    categorize_targets, category_report, predict_targets, target_word_accuracy, Bucket, BucketFlags, BucketStats,
    CategoryReport,
};
pub use sweep::{cell_configs, run_sweep, sweep_tsv, SweepKind, SweepRow, SweepSpec};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::ForwardCtx;
use crate::scalar::Scalar;

/// Anything that maps a token sequence to next-token log-probabilities.
pub trait Scorer: Sync {
    fn vocab_size(&self) -> usize;

    /// `[ids.len() × V]` log-probabilities, row-major. Row `r` is the
    /// distribution of the token following `ids[r]` given `ids[..=r]`.
    fn log_prob_rows(&self, ids: &[usize]) -> Result<Vec<f64>>;
}

impl<T: Scalar> Scorer for Model<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn log_prob_rows(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.log_probs(&mut tape, ids, ids.len(), &ForwardCtx::eval())?;
        Ok(tape.data(out).iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalUnit {
    WordPpl,
    CharBpc,
}

impl EvalUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalUnit::WordPpl => "word_ppl",
            EvalUnit::CharBpc => "char_bpc",
        }
    }
}

impl fmt::Display for EvalUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word_ppl" => Ok(EvalUnit::WordPpl),
            "char_bpc" => Ok(EvalUnit::CharBpc),
            other => Err(Error::Config(format!("unknown eval unit {other:?} (expected word_ppl|char_bpc)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    /// Block length fed to the model.
    pub seq_len: usize,
    /// Scored suffix of every block after the first.
    pub target_len: usize,
    pub unit: EvalUnit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seq_len: 64,
            target_len: 16,
            unit: EvalUnit::WordPpl,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_len == 0 || self.target_len > self.seq_len {
            return Err(Error::Config(format!(
                "need 1 <= eval target_len ({}) <= eval seq_len ({})",
                self.target_len, self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub tokens: usize,
    /// Natural-log negative log-likelihood summed over scored tokens.
    pub nll_sum: f64,
    pub ppl: f64,
    pub bpc: f64,
}

impl ScoreReport {
    pub fn from_nlls(nlls: impl IntoIterator<Item = f64>) -> ScoreReport {
        let mut sum = NeumaierSum::default();
        let mut tokens = 0;
        for v in nlls {
            sum.add(v);
            tokens += 1;
        }
        let nll_sum = sum.total();
        let mean = nll_sum / tokens.max(1) as f64;
        ScoreReport {
            tokens,
            nll_sum,
            ppl: mean.exp(),
            bpc: mean / std::f64::consts::LN_2,
        }
    }

    pub fn tsv_header() -> &'static str {
        "split\ttokens\tnll_sum\tppl\tbpc"
    }

    pub fn tsv_row(&self, split: &str) -> String {
        format!("{split}\t{}\t{}\t{}\t{}", self.tokens, self.nll_sum, self.ppl, self.bpc)
    }
}

/// Compensated summation; the result does not depend on magnitude ordering
/// as badly as a naive running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// One model call of the block protocol: inputs `ids[start..start + len]`,
/// rows `score_from..len` scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
    pub score_from: usize,
}

/// Block layout for a split of `n` tokens. Every target position
/// `1..n` is scored exactly once.
pub fn block_plan(n: usize, cfg: &EvalConfig) -> Result<Vec<Block>> {
    cfg.validate()?;
    let (seq, tl) = (cfg.seq_len, cfg.target_len);
    if n <= seq {
        return Err(Error::Data(format!(
            "split of {n} tokens is shorter than one evaluation block (needs at least {})",
            seq + 1
        )));
    }
    let mut blocks = vec![Block {
        start: 0,
        len: seq,
        score_from: 0,
    }];
    // targets 1..=covered are scored
    let mut covered = seq;
    while covered + tl < n {
        blocks.push(Block {
            start: covered + tl - seq,
            len: seq,
            score_from: seq - tl,
        });
        covered += tl;
    }
    let rest = n - 1 - covered;
    if rest > 0 {
        blocks.push(Block {
            start: n - 1 - seq,
            len: seq,
            score_from: seq - rest,
        });
    }
    Ok(blocks)
}

/// Per-token record of the block protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenScore {
    /// Index of the predicted token in the split.
    pub target: usize,
    /// Tokens visible to the model, including the immediately preceding one.
    pub context: usize,
    pub nll: f64,
}

fn nll_at(rows: &[f64], v: usize, row: usize, target: usize) -> Result<f64> {
    if target >= v {
        return Err(Error::Index {
            op: "score_corpus",
            index: target,
            bound: v,
        });
    }
    Ok(-rows[row * v + target])
}

/// Token-level scores in split order. Blocks run in parallel; the
/// reduction is ordered, so results do not depend on thread count.
pub fn score_tokens<S: Scorer>(scorer: &S, ids: &[usize], cfg: &EvalConfig) -> Result<Vec<TokenScore>> {
    let plan = block_plan(ids.len(), cfg)?;
    let v = scorer.vocab_size();
    let per_block: Vec<Result<Vec<TokenScore>>> = plan
        .par_iter()
        .map(|b| {
            let rows = scorer.log_prob_rows(&ids[b.start..b.start + b.len])?;
            (b.score_from..b.len)
                .map(|r| {
                    let target = b.start + r + 1;
                    Ok(TokenScore {
                        target,
                        context: r + 1,
                        nll: nll_at(&rows, v, r, ids[target])?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(ids.len() - 1);
    for block in per_block {
        out.extend(block?);
    }
    Ok(out)
}

pub fn score_corpus<S: Scorer>(scorer: &S, ids: &[usize], cfg: &EvalConfig) -> Result<ScoreReport> {
    let scores = score_tokens(scorer, ids, cfg)?;
    Ok(ScoreReport::from_nlls(scores.iter().map(|s| s.nll)))
}

/// Reference scorer: every target gets its own forward pass over the
/// longest prefix of at most `max_context` tokens. Quadratic; for tests.
pub fn brute_force_scores<S: Scorer>(scorer: &S, ids: &[usize], max_context: usize) -> Result<Vec<TokenScore>> {
    if max_context == 0 {
        return Err(Error::Config("max_context must be positive".into()));
    }
    let v = scorer.vocab_size();
    (1..ids.len())
        .into_par_iter()
        .map(|t| {
            let start = t.saturating_sub(max_context);
            let rows = scorer.log_prob_rows(&ids[start..t])?;
            Ok(TokenScore {
                target: t,
                context: t - start,
                nll: nll_at(&rows, v, t - start - 1, ids[t])?,
            })
        })
        .collect()
}
