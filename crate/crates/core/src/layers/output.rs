use super::Init;
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `logits = (h · tie_proj) · tableᵀ`. `table` is the same variable the
/// input lookup reads, so both uses accumulate onto one gradient.
pub fn tied_output_logits<T: Scalar>(tape: &mut Tape<T>, h: Var, table: Var, tie_proj: Option<Var>) -> Result<Var> {
    let (_, d_model) = tape.value(h).dims2("tied_output")?;
    let (_, d_emb) = tape.value(table).dims2("tied_output")?;
    let h = match tie_proj {
        Some(p) => tape.matmul(h, p)?,
        None if d_model != d_emb => {
            return Err(Error::Config(format!(
                "tied output needs a projection from d_model {d_model} to d_emb {d_emb}"
            )))
        }
        None => h,
    };
    tape.matmul_nt(h, table)
}

/// One tail cluster covering ids `start..end`.
#[derive(Debug, Clone, PartialEq)]
pub struct TailCluster {
    pub start: usize,
    pub end: usize,
    /// `[d_model × d_tail]`
    pub proj: ParamId,
    /// `[d_tail × (end - start)]`
    pub out: ParamId,
}

/// Frequency-clustered output layer. Head words `0..cutoffs[0]` score
/// against rows of the output table; each tail cluster gets one extra head
/// logit and its own down-projected softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSoftmaxParams {
    pub vocab_size: usize,
    pub cutoffs: Vec<usize>,
    /// `[n_tails × d_model]`, absent with no tails.
    pub cluster_weights: Option<ParamId>,
    pub tails: Vec<TailCluster>,
}

pub fn validate_cutoffs(cutoffs: &[usize], vocab_size: usize) -> Result<()> {
    if cutoffs.first() == Some(&0) {
        return Err(Error::Config("adaptive softmax cutoffs must be positive".into()));
    }
    if cutoffs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("adaptive softmax cutoffs {cutoffs:?} are not strictly ascending")));
    }
    if let Some(&last) = cutoffs.last() {
        if last >= vocab_size {
            return Err(Error::Config(format!(
                "adaptive softmax cutoff {last} is not below the vocabulary size {vocab_size}"
            )));
        }
    }
    Ok(())
}

impl AdaptiveSoftmaxParams {
    /// Tail `i` projects to `max(1, d_model / 4^(i+1))` dimensions.
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        prefix: &str,
        d_model: usize,
        vocab_size: usize,
        cutoffs: &[usize],
    ) -> Result<Self> {
        validate_cutoffs(cutoffs, vocab_size)?;
        let cluster_weights = if cutoffs.is_empty() {
            None
        } else {
            Some(init.weight(&format!("{prefix}.clusters"), &[cutoffs.len(), d_model])?)
        };
        let mut bounds = cutoffs.to_vec();
        bounds.push(vocab_size);
        let mut tails = Vec::with_capacity(cutoffs.len());
        for (i, w) in bounds.windows(2).enumerate() {
            let d_tail = (d_model >> (2 * (i + 1))).max(1);
            tails.push(TailCluster {
                start: w[0],
                end: w[1],
                proj: init.weight(&format!("{prefix}.tail.{i}.proj"), &[d_model, d_tail])?,
                out: init.weight(&format!("{prefix}.tail.{i}.out"), &[d_tail, w[1] - w[0]])?,
            });
        }
        Ok(AdaptiveSoftmaxParams {
            vocab_size,
            cutoffs: cutoffs.to_vec(),
            cluster_weights,
            tails,
        })
    }

    pub fn head_size(&self) -> usize {
        self.cutoffs.first().copied().unwrap_or(self.vocab_size)
    }

    fn cluster_of(&self, id: usize) -> Option<usize> {
        self.tails.iter().position(|t| (t.start..t.end).contains(&id))
    }
}

/// Head log-softmax over `[head words ; one logit per tail]`.
fn head_log_probs<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    table: Var,
    params: &AdaptiveSoftmaxParams,
) -> Result<Var> {
    let rows = tape.value(table).dims2("adaptive_softmax")?.0;
    if rows != params.vocab_size {
        return Err(Error::shape("adaptive_softmax", tape.shape(table), &[params.vocab_size]));
    }
    let head_words = if params.head_size() == rows {
        table
    } else {
        tape.slice_rows(table, 0, params.head_size())?
    };
    let mut head = tape.matmul_nt(h, head_words)?;
    if let Some(cw) = params.cluster_weights {
        let cw = tape.param(store, cw);
        let cl = tape.matmul_nt(h, cw)?;
        head = tape.concat_cols(&[head, cl])?;
    }
    Ok(tape.log_softmax(head))
}

fn tail_log_probs<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    tail: &TailCluster,
) -> Result<Var> {
    let proj = tape.param(store, tail.proj);
    let out = tape.param(store, tail.out);
    let z = tape.matmul(h, proj)?;
    let logits = tape.matmul(z, out)?;
    Ok(tape.log_softmax(logits))
}

/// Log-probability of each target: `[N]`. Tail rows are only evaluated for
/// targets that fall in that tail.
pub fn adaptive_target_log_probs<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    table: Var,
    params: &AdaptiveSoftmaxParams,
    targets: &[usize],
) -> Result<Var> {
    let n = tape.value(h).dims2("adaptive_softmax")?.0;
    if targets.len() != n {
        return Err(Error::shape("adaptive_softmax", tape.shape(h), &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= params.vocab_size) {
        return Err(Error::Index {
            op: "adaptive_softmax",
            index: bad,
            bound: params.vocab_size,
        });
    }
    let head = head_log_probs(tape, store, h, table, params)?;
    let head_width = tape.shape(head)[1];
    let c0 = params.head_size();
    let mut terms = Vec::with_capacity(2 * n);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); params.tails.len()];
    for (r, &y) in targets.iter().enumerate() {
        match params.cluster_of(y) {
            None => terms.push((r, head, r * head_width + y)),
            Some(c) => {
                terms.push((r, head, r * head_width + c0 + c));
                members[c].push(r);
            }
        }
    }
    for (c, rows) in members.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let tail = &params.tails[c];
        let hs = tape.gather_rows(h, rows)?;
        let lp = tail_log_probs(tape, store, hs, tail)?;
        let size = tail.end - tail.start;
        for (i, &r) in rows.iter().enumerate() {
            terms.push((r, lp, i * size + targets[r] - tail.start));
        }
    }
    tape.pick_sum(&[n], terms)
}

/// Mean negative log-likelihood of `targets`.
pub fn adaptive_nll<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    table: Var,
    params: &AdaptiveSoftmaxParams,
    targets: &[usize],
) -> Result<Var> {
    let lp = adaptive_target_log_probs(tape, store, h, table, params, targets)?;
    let total = tape.sum(lp);
    Ok(tape.scale(total, T::of(-1.0 / targets.len() as f64)))
}

/// Full `[N × V]` log-probability table; intended for small vocabularies.
pub fn adaptive_log_prob_table<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    table: Var,
    params: &AdaptiveSoftmaxParams,
) -> Result<Var> {
    let head = head_log_probs(tape, store, h, table, params)?;
    if params.tails.is_empty() {
        return Ok(head);
    }
    let n = tape.value(h).dims2("adaptive_softmax")?.0;
    let v = params.vocab_size;
    let head_width = tape.shape(head)[1];
    let c0 = params.head_size();
    let mut terms = Vec::with_capacity(n * (v + v - c0));
    for r in 0..n {
        for w in 0..c0 {
            terms.push((r * v + w, head, r * head_width + w));
        }
    }
    for (c, tail) in params.tails.iter().enumerate() {
        let lp = tail_log_probs(tape, store, h, tail)?;
        let size = tail.end - tail.start;
        for r in 0..n {
            for i in 0..size {
                let o = r * v + tail.start + i;
                terms.push((o, head, r * head_width + c0 + c));
                terms.push((o, lp, r * size + i));
            }
        }
    }
    tape.pick_sum(&[n, v], terms)
}
