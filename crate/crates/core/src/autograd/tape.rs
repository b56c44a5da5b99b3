//! Operation tape for reverse-mode differentiation.
//!
//! Forward operations append a node holding the output value and whatever
//! the backward rule needs. [`Tape::backward`] walks the nodes in reverse
//! and pushes gradients to their inputs; leaves that were registered from a
//! [`ParamStore`] forward their gradient to the owning parameter.

use rand::Rng;

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Mode;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Window {
        x: Var,
        pad: Var,
        k: usize,
        seq_len: usize,
        shift: usize,
    },
    Global {
        x: Var,
        kernels: Option<Var>,
        k: usize,
        seq_len: usize,
        shift: usize,
        prefix: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        window: Option<usize>,
        probs: Vec<T>,
        mask: Option<Vec<T>>,
    },
    PickSum {
        terms: Vec<(usize, Var, usize)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

/// Region bounds for the window/global ops: row `t` of a sequence looks at
/// positions `[t + shift - k, t + shift)`; the distant region is everything
/// before that.
fn window_start(t: usize, k: usize, shift: usize) -> isize {
    (t + shift) as isize - k as isize
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        self.nodes.push(Node {
            value: value.with_requires_grad(rg),
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Registers a parameter as a leaf; `backward` forwards its gradient to
    /// the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let mut value = store.tensor(id).clone();
        value.zero_grad();
        self.nodes.push(Node {
            value: value.with_requires_grad(true),
            op: Op::Leaf,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    /// `a·b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            k as isize,
            1,
            self.data(b),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn check_broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() <= sa.len() && sa.ends_with(sb) {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    /// Elementwise sum; `b` may be a trailing-axes broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "add")?;
        let bd = self.data(b);
        let nb = bd.len();
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % nb]).collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` may be a trailing-axes broadcast of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "mul")?;
        let bd = self.data(b);
        let nb = bd.len();
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| x * bd[i % nb]).collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(value, Op::Scale { a, s }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Normalizes each row over the last axis with the population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gain), self.data(bias));
        let dn = T::of(d as f64);
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("softmax_cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for r in 0..n {
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p /= z);
            total += z.ln() - (row[targets[r]] - max);
        }
        let loss = total / T::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, c) = rows_cols(self.shape(x));
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (rows, c) = rows_cols(self.shape(x));
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            log_softmax_in_place(&mut out[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Row gather: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                op: "embedding_lookup",
                index: bad,
                bound: v,
            });
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding_lookup", &[v, d], &[0]));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Inverted dropout. Eval mode and `p == 0` return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = self.dims2(parts[0], "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(Error::shape("concat", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, c) = self.dims2(x, "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let out = self.data(x)[start * c..end * c].to_vec();
        let value = Tensor::new(&[end - start, c], out)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Sliding concatenation over `x: [B·seq_len × d]`. Row `t` of each
    /// sequence is `[x_{t+shift-k}; …; x_{t+shift-1}]`, with `pad` standing in
    /// for positions before the sequence start. `shift = 0` makes row `t` the
    /// window strictly before `t`; `shift = 1` includes `t` itself.
    pub fn window_concat(&mut self, x: Var, pad: Var, k: usize, seq_len: usize, shift: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "concat_window")?;
        if k == 0 || seq_len == 0 || rows % seq_len != 0 || self.value(pad).numel() != d {
            return Err(Error::shape("concat_window", self.shape(x), self.shape(pad)));
        }
        let (xd, pd) = (self.data(x), self.data(pad));
        let mut out = Vec::with_capacity(rows * k * d);
        for b in 0..rows / seq_len {
            for t in 0..seq_len {
                let start = window_start(t, k, shift);
                for j in 0..k {
                    let p = start + j as isize;
                    if p < 0 {
                        out.extend_from_slice(pd);
                    } else {
                        let r = b * seq_len + p as usize;
                        out.extend_from_slice(&xd[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, k * d], out)?;
        Ok(self.push(
            value,
            Op::Window {
                x,
                pad,
                k,
                seq_len,
                shift,
            },
            &[x, pad],
        ))
    }

    /// Summaries of the positions before each row's local window.
    ///
    /// With `kernels: Some([n × w])` each kernel runs as a depthwise causal
    /// convolution (zero left padding, stride 1) over the distant region and
    /// its outputs are mean-pooled, giving `n` vectors per row. With `None`
    /// the single output vector is the plain mean of the region. An empty
    /// region yields zeros.
    pub fn global_context(
        &mut self,
        x: Var,
        kernels: Option<Var>,
        k: usize,
        seq_len: usize,
        shift: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(x, "global_context")?;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("global_context", self.shape(x), &[seq_len]));
        }
        let (n_k, width) = match kernels {
            Some(kv) => self.dims2(kv, "global_context")?,
            None => (1, 1),
        };
        let xd = self.data(x);
        let wd = kernels.map(|kv| self.data(kv));
        // prefix[b][m] = sum of rows 0..m of sequence b, (seq_len + 1) × d each
        let mut prefix = vec![T::zero(); (rows / seq_len) * (seq_len + 1) * d];
        let mut out = vec![T::zero(); rows * n_k * d];
        for b in 0..rows / seq_len {
            let pre = &mut prefix[b * (seq_len + 1) * d..(b + 1) * (seq_len + 1) * d];
            for m in 0..seq_len {
                let src = &xd[(b * seq_len + m) * d..(b * seq_len + m + 1) * d];
                for c in 0..d {
                    pre[(m + 1) * d + c] = pre[m * d + c] + src[c];
                }
            }
            for t in 0..seq_len {
                let region = window_start(t, k, shift).max(0) as usize;
                if region == 0 {
                    continue;
                }
                let rn = T::of(region as f64);
                let row = &mut out[(b * seq_len + t) * n_k * d..(b * seq_len + t + 1) * n_k * d];
                match wd {
                    None => {
                        for c in 0..d {
                            row[c] = pre[region * d + c] / rn;
                        }
                    }
                    Some(w) => {
                        for j in 0..n_k {
                            let dst = &mut row[j * d..(j + 1) * d];
                            for i in 0..width {
                                let m = (region as isize - width as isize + 1 + i as isize).max(0) as usize;
                                let wt = w[j * width + i];
                                for c in 0..d {
                                    dst[c] += wt * pre[m * d + c];
                                }
                            }
                            dst.iter_mut().for_each(|v| *v /= rn);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, n_k * d], out)?;
        let mut inputs = vec![x];
        inputs.extend(kernels);
        Ok(self.push(
            value,
            Op::Global {
                x,
                kernels,
                k,
                seq_len,
                shift,
                prefix,
            },
            &inputs,
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask over
    /// `[B·seq_len × d]` projections. With `window = Some(w)` row `t` sees
    /// only positions `t-w..=t`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        window: Option<usize>,
        dropout: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("attention", &[rows, d], &[heads, seq_len]));
        }
        if window == Some(0) {
            return Err(Error::Config("attention window must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout probability {dropout} outside [0, 1)")));
        }
        let probs = attention_probs(self.data(q), self.data(k), rows, d, heads, seq_len, window);
        let mask = if mode == Mode::Train && dropout > 0.0 {
            let keep = T::of(1.0 / (1.0 - dropout));
            Some(
                probs
                    .iter()
                    .map(|&p| {
                        // masked positions draw nothing
                        if p != T::zero() && rng.random::<f64>() >= dropout {
                            keep
                        } else {
                            T::zero()
                        }
                    })
                    .collect::<Vec<T>>(),
            )
        } else {
            None
        };
        let dh = d / heads;
        let vd = self.data(v);
        let mut out = vec![T::zero(); rows * d];
        let tt = seq_len * seq_len;
        for b in 0..rows / seq_len {
            for h in 0..heads {
                let base = (b * heads + h) * tt;
                for i in 0..seq_len {
                    let lo = support_start(i, window);
                    let orow = (b * seq_len + i) * d + h * dh;
                    for j in lo..=i {
                        let mut p = probs[base + i * seq_len + j];
                        if let Some(m) = &mask {
                            p *= m[base + i * seq_len + j];
                        }
                        let vrow = (b * seq_len + j) * d + h * dh;
                        for c in 0..dh {
                            out[orow + c] += p * vd[vrow + c];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                window,
                probs,
                mask,
            },
            &[q, k, v],
        ))
    }

    /// Output element `o` is the sum of the picked elements tagged `o`.
    /// Terms are `(output index, source, flat index into source)`.
    pub fn pick_sum(&mut self, shape: &[usize], terms: Vec<(usize, Var, usize)>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let mut out = vec![T::zero(); n];
        for &(o, src, idx) in &terms {
            if o >= n {
                return Err(Error::Index {
                    op: "pick_sum",
                    index: o,
                    bound: n,
                });
            }
            let sd = self.data(src);
            if idx >= sd.len() {
                return Err(Error::Index {
                    op: "pick_sum",
                    index: idx,
                    bound: sd.len(),
                });
            }
            out[o] += sd[idx];
        }
        let mut inputs: Vec<Var> = terms.iter().map(|t| t.1).collect();
        inputs.sort_unstable_by_key(|v| v.0);
        inputs.dedup();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::PickSum { terms }, &inputs))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate onto leaf
    /// nodes that require them and onto the linked parameters in `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if let Some(pid) = self.nodes[i].param {
                    store.get_mut(pid).tensor.accumulate_grad(&g);
                }
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = rows_cols(self.shape(a));
                let n = out_shape[1];
                if self.wants(a) {
                    let ga = slot(grads, a, m * k);
                    let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, self.data(b), rsb, csb, T::one(), ga, k as isize, 1);
                }
                if self.wants(b) {
                    let gb = slot(grads, b, k * n);
                    if trans_b {
                        T::gemm(n, m, k, T::one(), g, 1, n as isize, self.data(a), k as isize, 1, T::one(), gb, k as isize, 1);
                    } else {
                        T::gemm(k, m, n, T::one(), self.data(a), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.wants(b) {
                    let nb = self.value(b).numel();
                    let gb = slot(grads, b, nb);
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % nb] += gv;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let nb = bd.len();
                if self.wants(a) {
                    let ga = slot(grads, a, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        ga[idx] += gv * bd[idx % nb];
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, nb);
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % nb] += gv * ad[idx];
                    }
                }
            }
            &Op::Scale { a, s } => {
                let ga = slot(grads, a, g.len());
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += gv * s;
                }
            }
            &Op::Relu(a) => {
                let ad = self.data(a);
                let ga = slot(grads, a, g.len());
                for idx in 0..g.len() {
                    if ad[idx] > T::zero() {
                        ga[idx] += g[idx];
                    }
                }
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                let ga = slot(grads, a, g.len());
                for idx in 0..g.len() {
                    ga[idx] += g[idx] * (T::one() - y[idx] * y[idx]);
                }
            }
            &Op::Sum(a) => {
                let n = self.value(a).numel();
                slot(grads, a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, d) = rows_cols(out_shape);
                let gd = self.data(*gain);
                if self.wants(*gain) {
                    let gg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, rows * d);
                    let dn = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_dx = T::zero();
                        let mut mean_dxx = T::zero();
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gd[c];
                            mean_dx += dxhat[c];
                            mean_dxx += dxhat[c] * xhat[r * d + c];
                        }
                        mean_dx /= dn;
                        mean_dxx /= dn;
                        for c in 0..d {
                            gx[r * d + c] += rstd[r] * (dxhat[c] - mean_dx - xhat[r * d + c] * mean_dxx);
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let n = targets.len();
                let v = probs.len() / n;
                let s = g[0] / T::of(n as f64);
                let gl = slot(grads, *logits, n * v);
                for r in 0..n {
                    for c in 0..v {
                        let onehot = if c == targets[r] { T::one() } else { T::zero() };
                        gl[r * v + c] += s * (probs[r * v + c] - onehot);
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let (rows, c) = rows_cols(out_shape);
                let gx = slot(grads, x, rows * c);
                for r in 0..rows {
                    let span = r * c..(r + 1) * c;
                    let dot: T = g[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                    for idx in span {
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let y = node.value.data();
                let (rows, c) = rows_cols(out_shape);
                let gx = slot(grads, x, rows * c);
                for r in 0..rows {
                    let span = r * c..(r + 1) * c;
                    let total: T = g[span.clone()].iter().copied().sum();
                    for idx in span {
                        gx[idx] += g[idx] - y[idx].exp() * total;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (vocab, d) = rows_cols(self.shape(*table));
                let gt = slot(grads, *table, vocab * d);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for idx in 0..g.len() {
                    gx[idx] += g[idx] * mask[idx];
                }
            }
            Op::ConcatCols { parts } => {
                let rows = out_shape[0];
                let total = out_shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let n = self.value(x).numel();
                let c = out_shape[1];
                let gx = slot(grads, x, n);
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
            &Op::Window {
                x,
                pad,
                k,
                seq_len,
                shift,
            } => {
                let (rows, d) = rows_cols(self.shape(x));
                let mut gpad = vec![T::zero(); d];
                let want_x = self.wants(x);
                {
                    let gx = if want_x { Some(slot(grads, x, rows * d)) } else { None };
                    let mut gx = gx;
                    for b in 0..rows / seq_len {
                        for t in 0..seq_len {
                            let start = window_start(t, k, shift);
                            let orow = (b * seq_len + t) * k * d;
                            for j in 0..k {
                                let src = &g[orow + j * d..orow + (j + 1) * d];
                                let p = start + j as isize;
                                if p < 0 {
                                    add_into(&mut gpad, src);
                                } else if let Some(gx) = gx.as_deref_mut() {
                                    let r = b * seq_len + p as usize;
                                    add_into(&mut gx[r * d..(r + 1) * d], src);
                                }
                            }
                        }
                    }
                }
                if self.wants(pad) {
                    add_into(slot(grads, pad, d), &gpad);
                }
            }
            Op::Global {
                x,
                kernels,
                k,
                seq_len,
                shift,
                prefix,
            } => {
                let (rows, d) = rows_cols(self.shape(*x));
                let (seq_len, k, shift) = (*seq_len, *k, *shift);
                let (n_k, width) = match kernels {
                    Some(kv) => rows_cols(self.shape(*kv)),
                    None => (1, 1),
                };
                let wd = kernels.map(|kv| self.data(kv));
                let mut gw = vec![T::zero(); n_k * width];
                let mut gx_all = vec![T::zero(); rows * d];
                for b in 0..rows / seq_len {
                    let pre = &prefix[b * (seq_len + 1) * d..(b + 1) * (seq_len + 1) * d];
                    // gradient w.r.t. prefix sums, then suffix-summed onto rows
                    let mut gpre = vec![T::zero(); (seq_len + 1) * d];
                    for t in 0..seq_len {
                        let region = window_start(t, k, shift).max(0) as usize;
                        if region == 0 {
                            continue;
                        }
                        let rn = T::of(region as f64);
                        let go = &g[(b * seq_len + t) * n_k * d..(b * seq_len + t + 1) * n_k * d];
                        match wd {
                            None => {
                                for c in 0..d {
                                    gpre[region * d + c] += go[c] / rn;
                                }
                            }
                            Some(w) => {
                                for j in 0..n_k {
                                    let goj = &go[j * d..(j + 1) * d];
                                    for i in 0..width {
                                        let m = (region as isize - width as isize + 1 + i as isize).max(0) as usize;
                                        let wt = w[j * width + i];
                                        let mut dot = T::zero();
                                        for c in 0..d {
                                            dot += goj[c] * pre[m * d + c];
                                            gpre[m * d + c] += wt * goj[c] / rn;
                                        }
                                        gw[j * width + i] += dot / rn;
                                    }
                                }
                            }
                        }
                    }
                    let mut running = vec![T::zero(); d];
                    for q in (0..seq_len).rev() {
                        add_into(&mut running, &gpre[(q + 1) * d..(q + 2) * d]);
                        add_into(&mut gx_all[(b * seq_len + q) * d..(b * seq_len + q + 1) * d], &running);
                    }
                }
                if self.wants(*x) {
                    add_into(slot(grads, *x, rows * d), &gx_all);
                }
                if let Some(kv) = kernels {
                    if self.wants(*kv) {
                        add_into(slot(grads, *kv, n_k * width), &gw);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                window,
                probs,
                mask,
            } => {
                let (rows, d) = rows_cols(out_shape);
                let (heads, seq_len, window) = (*heads, *seq_len, *window);
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut gq = vec![T::zero(); rows * d];
                let mut gk = vec![T::zero(); rows * d];
                let mut gv = vec![T::zero(); rows * d];
                let tt = seq_len * seq_len;
                let mut dp = vec![T::zero(); seq_len];
                for b in 0..rows / seq_len {
                    for h in 0..heads {
                        let base = (b * heads + h) * tt;
                        for i in 0..seq_len {
                            let lo = support_start(i, window);
                            let orow = (b * seq_len + i) * d + h * dh;
                            let go = &g[orow..orow + dh];
                            let mut weighted = T::zero();
                            for j in lo..=i {
                                let idx = base + i * seq_len + j;
                                let m = mask.as_ref().map_or(T::one(), |m| m[idx]);
                                let vrow = (b * seq_len + j) * d + h * dh;
                                let mut dot = T::zero();
                                for c in 0..dh {
                                    dot += go[c] * vd[vrow + c];
                                    gv[vrow + c] += probs[idx] * m * go[c];
                                }
                                dp[j] = dot * m;
                                weighted += probs[idx] * dp[j];
                            }
                            for j in lo..=i {
                                let idx = base + i * seq_len + j;
                                let ds = probs[idx] * (dp[j] - weighted) * scale;
                                let krow = (b * seq_len + j) * d + h * dh;
                                for c in 0..dh {
                                    gq[orow + c] += ds * kd[krow + c];
                                    gk[krow + c] += ds * qd[orow + c];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.wants(var) {
                        add_into(slot(grads, var, rows * d), &buf);
                    }
                }
            }
            Op::PickSum { terms } => {
                for &(o, src, idx) in terms {
                    let n = self.value(src).numel();
                    slot(grads, src, n)[idx] += g[o];
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// First position visible from row `i`.
pub(crate) fn support_start(i: usize, window: Option<usize>) -> usize {
    match window {
        Some(w) => i.saturating_sub(w),
        None => 0,
    }
}

/// Softmax-normalized attention weights, laid out `[B][head][i][j]` with
/// zeros outside each row's support.
pub fn attention_probs<T: Scalar>(
    q: &[T],
    k: &[T],
    rows: usize,
    d: usize,
    heads: usize,
    seq_len: usize,
    window: Option<usize>,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let tt = seq_len * seq_len;
    let mut probs = vec![T::zero(); (rows / seq_len) * heads * tt];
    for b in 0..rows / seq_len {
        for h in 0..heads {
            let base = (b * heads + h) * tt;
            for i in 0..seq_len {
                let lo = support_start(i, window);
                let qrow = &q[(b * seq_len + i) * d + h * dh..(b * seq_len + i) * d + (h + 1) * dh];
                let row = &mut probs[base + i * seq_len..base + (i + 1) * seq_len];
                for j in lo..=i {
                    let krow = &k[(b * seq_len + j) * d + h * dh..(b * seq_len + j) * d + (h + 1) * dh];
                    row[j] = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(&mut row[lo..=i]);
            }
        }
    }
    probs
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

pub fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row.iter_mut().for_each(|x| *x -= lse);
}
