//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated. [`Tape::backward`]
//! walks the record from the loss towards the leaves exactly once, adding each
//! operation's contribution into the gradients of its operands, so a value
//! consumed by `k` operations receives the sum of `k` contributions.
//!
//! ```
//! use numerics::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let p = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.scale(tape.sum(sq).unwrap(), 0.5).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[1.0, -2.0, 3.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumericsError, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, gemm_nt, gemm_tn, softmax_rows, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Sum(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Fir {
        x: usize,
        taps: usize,
        offsets: Vec<isize>,
    },
    LogSumExpRows(usize),
    Custom {
        x: usize,
        grad: Tensor,
    },
    SegmentAttention(Box<SegmentAttention>),
}

struct SegmentAttention {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    /// `(query start, query len, key start, key len)` per segment.
    segs: Vec<(usize, usize, usize, usize)>,
    causal: bool,
    /// Attention weights per head and segment, row-major within a segment.
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Single-threaded operation record. Independent tapes may live on
/// different threads.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Ok(Var {
            tape: self.id,
            idx: nodes.len() - 1,
        })
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn get(&self, v: Var) -> Result<(usize, Rc<Tensor>)> {
        let idx = self.check(v)?;
        Ok((idx, self.nodes.borrow()[idx].value.clone()))
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", &ta, &tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::from_parts(vec![m, n], gemm(ta.data(), tb.data(), m, k, n));
        self.push("matmul", out, Op::MatMul(ia, ib))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        self.push("transpose", ta.transpose(), Op::Transpose(ia))
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, &ta, &tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(
            name,
            Tensor::from_parts(ta.shape().to_vec(), data),
            op(ia, ib),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(row)?;
        let c = ta.cols();
        if tb.numel() != c {
            return Err(mismatch(name, &ta, &tb));
        }
        let mut data = ta.data().to_vec();
        for r in data.chunks_mut(c) {
            for (x, &y) in r.iter_mut().zip(tb.data()) {
                *x = f(*x, y);
            }
        }
        self.push(
            name,
            Tensor::from_parts(ta.shape().to_vec(), data),
            op(ia, ib),
        )
    }

    /// `a[m×n] + bias[n]` on every row.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, bias, |x, y| x + y, Op::AddRow)
    }

    /// `a[m×n] ⊙ coef[n]` on every row.
    pub fn mul_row(&self, a: Var, coef: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, coef, |x, y| x * y, Op::MulRow)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        self.push("scale", ta.map(|x| x * c), Op::Scale(ia, c))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        self.push("relu", ta.map(|x| x.max(0.0)), Op::Relu(ia))
    }

    /// `x·W + b` for `x[m×k]`, `W[k×n]`, `b[n]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let out = Tensor::from_parts(ta.shape().to_vec(), softmax_rows(ta.data(), ta.cols()));
        self.push("softmax", out, Op::Softmax(ia))
    }

    /// Row softmax where entries with `keep[i] == false` get probability zero.
    /// Every row must keep at least one entry.
    pub fn masked_softmax(&self, a: Var, keep: &[bool]) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        if keep.len() != ta.numel() {
            return Err(invalid("masked_softmax", "mask length differs from input"));
        }
        let c = ta.cols();
        let mut out = vec![0.0; ta.numel()];
        for (r, (row, mrow)) in ta.data().chunks(c).zip(keep.chunks(c)).enumerate() {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(invalid("masked_softmax", format!("row {r} fully masked")));
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if mrow[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        // Shares the plain softmax backward: masked outputs are exactly zero.
        self.push(
            "masked_softmax",
            Tensor::from_parts(ta.shape().to_vec(), out),
            Op::Softmax(ia),
        )
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = crate::tensor::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(
            "log_softmax",
            Tensor::from_parts(ta.shape().to_vec(), out),
            Op::LogSoftmax(ia),
        )
    }

    /// Per-row layer normalization with learned `gamma`, `beta` of width `cols`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let (ig, tg) = self.get(gamma)?;
        let (ib, tb) = self.get(beta)?;
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(mismatch("layer_norm", &tx, &tg));
        }
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0; tx.numel()];
        for (r, row) in tx.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(tx.shape().to_vec(), out),
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
        )
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (it, tt) = self.get(table)?;
        let (v, d) = tt.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(invalid(
                    "embedding",
                    format!("id {id} outside table of {v} rows"),
                ));
            }
            out.extend_from_slice(tt.row(id));
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean cross-entropy of `logits[n×V]` against one-hot targets; `None`
    /// targets (padding) are ignored. Returns a scalar.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (il, tl) = self.get(logits)?;
        let (n, v) = tl.dims2();
        if targets.len() != n {
            return Err(invalid("cross_entropy", "one target per row required"));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(invalid("cross_entropy", "no non-padding targets"));
        }
        let probs = softmax_rows(tl.data(), v);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(invalid("cross_entropy", format!("target {t} >= {v}")));
                }
                let row = tl.row(r);
                loss -= row[t] - crate::tensor::log_sum_exp(row);
            }
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Inverted dropout with a mask drawn from `rng`; identity when `rate == 0`.
    pub fn dropout(&self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let (ix, tx) = self.get(x)?;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.push(
            "dropout",
            Tensor::from_parts(tx.shape().to_vec(), data),
            Op::Dropout { x: ix, mask },
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        self.push("sum", Tensor::scalar(ta.sum()), Op::Sum(ia))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (r, c) = ta.dims2();
        if start + len > c {
            return Err(invalid("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in ta.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { x: ia, start },
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let mut ids = Vec::with_capacity(parts.len());
        let mut values = Vec::with_capacity(parts.len());
        for &p in parts {
            let (i, t) = self.get(p)?;
            ids.push(i);
            values.push(t);
        }
        let r = values.first().map_or(0, |t| t.rows());
        if let Some(bad) = values.iter().find(|t| t.rows() != r) {
            return Err(mismatch("concat_cols", &values[0], bad));
        }
        let c: usize = values.iter().map(|t| t.cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            for t in &values {
                out.extend_from_slice(t.row(row));
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![r, c], out),
            Op::ConcatCols(ids),
        )
    }

    /// Depthwise FIR filter over time: `out[t] = Σₖ taps[k] ⊙ x[t + offsets[k]]`,
    /// with taps outside `[0, T)` contributing zero.
    pub fn fir(&self, x: Var, taps: Var, offsets: &[isize]) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let (it, tt) = self.get(taps)?;
        let (t_len, d) = tx.dims2();
        if tt.rows() != offsets.len() || tt.cols() != d {
            return Err(mismatch("fir", &tx, &tt));
        }
        let mut out = vec![0.0; t_len * d];
        for (k, &off) in offsets.iter().enumerate() {
            let tap = tt.row(k);
            for t in 0..t_len {
                let src = t as isize + off;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xs = tx.row(src as usize);
                let o = &mut out[t * d..(t + 1) * d];
                for j in 0..d {
                    o[j] += tap[j] * xs[j];
                }
            }
        }
        self.push(
            "fir",
            Tensor::from_parts(vec![t_len, d], out),
            Op::Fir {
                x: ix,
                taps: it,
                offsets: offsets.to_vec(),
            },
        )
    }

    /// `ln Σⱼ exp(x[r, j])` for every row; output is `rows × 1`.
    pub fn log_sum_exp_rows(&self, a: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let out = ta
            .data()
            .chunks(ta.cols())
            .map(crate::tensor::log_sum_exp)
            .collect();
        self.push(
            "log_sum_exp_rows",
            Tensor::from_parts(vec![ta.rows(), 1], out),
            Op::LogSumExpRows(ia),
        )
    }

    /// Scalar node whose value and local gradient with respect to `x` were
    /// computed elsewhere (e.g. a log-space dynamic program).
    pub fn custom_scalar(&self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        if grad.shape() != tx.shape() {
            return Err(mismatch("custom_scalar", &tx, &grad));
        }
        self.push(
            "custom_scalar",
            Tensor::scalar(value),
            Op::Custom { x: ix, grad },
        )
    }

    /// `softmax(q·kᵀ / √d_k) · v`, optionally restricted by a `keep` mask of
    /// shape `q.rows × k.rows`.
    pub fn attention(&self, q: Var, k: Var, v: Var, keep: Option<&[bool]>) -> Result<Var> {
        let dk = self.get(q)?.1.cols();
        let kt = self.transpose(k)?;
        let scores = self.scale(self.matmul(q, kt)?, 1.0 / (dk as f64).sqrt())?;
        let weights = match keep {
            Some(m) => self.masked_softmax(scores, m)?,
            None => self.softmax(scores)?,
        };
        self.matmul(weights, v)
    }

    /// Multi-head attention over packed sequences. Query segment `s` (rows
    /// `q_lens[..s].sum()..` of `q`) attends only to key segment `s`; with
    /// `causal`, query row `i` of a segment sees key rows `0..=i` of it.
    /// Heads split the columns of `q`/`k` (width `heads·d_k`) and `v` (width
    /// `heads·d_v`) evenly; the output concatenates the heads.
    pub fn segment_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_lens: &[usize],
        k_lens: &[usize],
        causal: bool,
    ) -> Result<Var> {
        const OP: &str = "segment_attention";
        let (iq, tq) = self.get(q)?;
        let (ik, tk) = self.get(k)?;
        let (iv, tv) = self.get(v)?;
        let (n, qc) = tq.dims2();
        let (m, kc) = tk.dims2();
        if qc != kc || tv.rows() != m {
            return Err(mismatch(OP, &tq, &tk));
        }
        if heads == 0 || qc % heads != 0 || tv.cols() % heads != 0 {
            return Err(invalid(OP, "column counts must divide evenly into heads"));
        }
        if q_lens.len() != k_lens.len()
            || q_lens.iter().sum::<usize>() != n
            || k_lens.iter().sum::<usize>() != m
        {
            return Err(invalid(
                OP,
                "segment lengths must cover q and k rows pairwise",
            ));
        }
        let mut segs = Vec::with_capacity(q_lens.len());
        let (mut qs, mut ks) = (0, 0);
        for (&ql, &kl) in q_lens.iter().zip(k_lens) {
            if ql > 0 && (kl == 0 || (causal && kl < ql)) {
                return Err(invalid(OP, "a query row has no visible key"));
            }
            segs.push((qs, ql, ks, kl));
            qs += ql;
            ks += kl;
        }
        let (dk, dv) = (qc / heads, tv.cols() / heads);
        let vc = tv.cols();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; n * vc];
        let mut probs = Vec::with_capacity(heads * segs.len());
        for h in 0..heads {
            for &(qs, ql, ks, kl) in &segs {
                let mut p = vec![0.0; ql * kl];
                for i in 0..ql {
                    let qrow = &tq.row(qs + i)[h * dk..(h + 1) * dk];
                    let visible = if causal { i + 1 } else { kl };
                    let prow = &mut p[i * kl..i * kl + visible];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let krow = &tk.row(ks + j)[h * dk..(h + 1) * dk];
                        *pj = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let max = prow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    prow.iter_mut().for_each(|pj| *pj /= sum);
                    let orow = &mut out[(qs + i) * vc + h * dv..(qs + i) * vc + (h + 1) * dv];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vrow = &tv.row(ks + j)[h * dv..(h + 1) * dv];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += pj * x);
                    }
                }
                probs.push(p);
            }
        }
        let op = SegmentAttention {
            q: iq,
            k: ik,
            v: iv,
            heads,
            segs,
            causal,
            probs,
        };
        self.push(
            OP,
            Tensor::from_parts(vec![n, vc], out),
            Op::SegmentAttention(Box::new(op)),
        )
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if !nodes[li].value.is_scalar() {
            return Err(NumericsError::NotScalar(nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::from_parts(
            nodes[li].value.shape().to_vec(),
            vec![1.0],
        ));

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(e) => e.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=li).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let da = gemm_nt(g.data(), tb.data(), m, n, k);
                    let db = gemm_tn(ta.data(), g.data(), m, k, n);
                    acc(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    acc(&mut grads, *b, Tensor::from_parts(vec![k, n], db));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip(&g, val(*b), |x, y| x * y);
                    let db = zip(&g, val(*a), |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, b) => {
                    let tb = val(*b);
                    let mut db = vec![0.0; tb.numel()];
                    for row in g.data().chunks(tb.numel()) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    acc(&mut grads, *b, Tensor::from_parts(tb.shape().to_vec(), db));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let c = tb.numel();
                    let mut db = vec![0.0; c];
                    let mut da = g.data().to_vec();
                    for (r, drow) in da.chunks_mut(c).enumerate() {
                        let arow = ta.row(r);
                        for j in 0..c {
                            db[j] += drow[j] * arow[j];
                            drow[j] *= tb.data()[j];
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_parts(ta.shape().to_vec(), da));
                    acc(&mut grads, *b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| x * c)),
                Op::Relu(a) => {
                    let d = zip(&g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    let mut d = g.data().to_vec();
                    for (drow, yrow) in d.chunks_mut(c).zip(out.data().chunks(c)) {
                        let s: f64 = drow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        drow.iter_mut()
                            .zip(yrow)
                            .for_each(|(x, y)| *x = y * (*x - s));
                    }
                    acc(&mut grads, *a, Tensor::from_parts(out.shape().to_vec(), d));
                }
                Op::LogSoftmax(a) => {
                    let c = out.cols();
                    let mut d = g.data().to_vec();
                    for (drow, lrow) in d.chunks_mut(c).zip(out.data().chunks(c)) {
                        let s: f64 = drow.iter().sum();
                        drow.iter_mut()
                            .zip(lrow)
                            .for_each(|(x, l)| *x -= l.exp() * s);
                    }
                    acc(&mut grads, *a, Tensor::from_parts(out.shape().to_vec(), d));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let tg = val(*gamma);
                    let c = tg.numel();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; g.numel()];
                    for (r, grow) in g.data().chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dgamma[j] += grow[j] * xh[j];
                            dbeta[j] += grow[j];
                            let dxh = grow[j] * tg.data()[j];
                            mean_d += dxh;
                            mean_dx += dxh * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let dxh = grow[j] * tg.data()[j];
                            dx[r * c + j] = inv_std[r] * (dxh - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                    acc(
                        &mut grads,
                        *gamma,
                        Tensor::from_parts(tg.shape().to_vec(), dgamma),
                    );
                    let tb = val(*beta);
                    acc(
                        &mut grads,
                        *beta,
                        Tensor::from_parts(tb.shape().to_vec(), dbeta),
                    );
                }
                Op::Embedding { table, ids } => {
                    let tt = val(*table);
                    let d = tt.cols();
                    let mut dt = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                    }
                    acc(
                        &mut grads,
                        *table,
                        Tensor::from_parts(tt.shape().to_vec(), dt),
                    );
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let tl = val(*logits);
                    let v = tl.cols();
                    let scale = g.item() / *count as f64;
                    let mut d = vec![0.0; tl.numel()];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let drow = &mut d[r * v..(r + 1) * v];
                            for j in 0..v {
                                drow[j] = probs[r * v + j] * scale;
                            }
                            drow[t] -= scale;
                        }
                    }
                    acc(
                        &mut grads,
                        *logits,
                        Tensor::from_parts(tl.shape().to_vec(), d),
                    );
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    acc(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Sum(a) => {
                    let ta = val(*a);
                    acc(&mut grads, *a, Tensor::full(ta.shape(), g.item()));
                }
                Op::SliceCols { x, start } => {
                    let tx = val(*x);
                    let (r, c) = tx.dims2();
                    let len = g.cols();
                    let mut d = vec![0.0; r * c];
                    for row in 0..r {
                        d[row * c + start..row * c + start + len].copy_from_slice(g.row(row));
                    }
                    acc(&mut grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let tp = val(p);
                        let (r, c) = tp.dims2();
                        let mut d = Vec::with_capacity(r * c);
                        for row in 0..r {
                            d.extend_from_slice(&g.row(row)[offset..offset + c]);
                        }
                        offset += c;
                        acc(&mut grads, p, Tensor::from_parts(tp.shape().to_vec(), d));
                    }
                }
                Op::Fir { x, taps, offsets } => {
                    let (tx, tt) = (val(*x), val(*taps));
                    let (t_len, d) = tx.dims2();
                    let mut dx = vec![0.0; tx.numel()];
                    let mut dt = vec![0.0; tt.numel()];
                    for (k, &off) in offsets.iter().enumerate() {
                        let tap = tt.row(k);
                        for t in 0..t_len {
                            let src = t as isize + off;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            let grow = g.row(t);
                            let xs = tx.row(src);
                            for j in 0..d {
                                dx[src * d + j] += tap[j] * grow[j];
                                dt[k * d + j] += xs[j] * grow[j];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                    acc(
                        &mut grads,
                        *taps,
                        Tensor::from_parts(tt.shape().to_vec(), dt),
                    );
                }
                Op::LogSumExpRows(a) => {
                    let ta = val(*a);
                    let c = ta.cols();
                    let mut d = softmax_rows(ta.data(), c);
                    for (r, row) in d.chunks_mut(c).enumerate() {
                        let s = g.data()[r];
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(&mut grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                Op::Custom { x, grad } => {
                    let s = g.item();
                    acc(&mut grads, *x, grad.map(|v| v * s));
                }
                Op::SegmentAttention(sa) => {
                    let (tq, tk, tv) = (val(sa.q), val(sa.k), val(sa.v));
                    let (qc, vc) = (tq.cols(), tv.cols());
                    let (dk, dv) = (qc / sa.heads, vc / sa.heads);
                    let scale = 1.0 / (dk as f64).sqrt();
                    let mut dq = vec![0.0; tq.numel()];
                    let mut dkm = vec![0.0; tk.numel()];
                    let mut dvm = vec![0.0; tv.numel()];
                    let mut probs = sa.probs.iter();
                    for h in 0..sa.heads {
                        for &(qs, ql, ks, kl) in &sa.segs {
                            let p = probs.next().expect("one block per head and segment");
                            let mut dp = vec![0.0; kl];
                            for i in 0..ql {
                                let visible = if sa.causal { i + 1 } else { kl };
                                let prow = &p[i * kl..i * kl + visible];
                                let grow = &g.row(qs + i)[h * dv..(h + 1) * dv];
                                let mut dot = 0.0;
                                for j in 0..visible {
                                    let vrow = &tv.row(ks + j)[h * dv..(h + 1) * dv];
                                    dp[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                    dot += prow[j] * dp[j];
                                    let dst = &mut dvm
                                        [(ks + j) * vc + h * dv..(ks + j) * vc + (h + 1) * dv];
                                    dst.iter_mut()
                                        .zip(grow)
                                        .for_each(|(d, x)| *d += prow[j] * x);
                                }
                                let qrow = &tq.row(qs + i)[h * dk..(h + 1) * dk];
                                for j in 0..visible {
                                    let ds = scale * prow[j] * (dp[j] - dot);
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow = &tk.row(ks + j)[h * dk..(h + 1) * dk];
                                    let qd = &mut dq
                                        [(qs + i) * qc + h * dk..(qs + i) * qc + (h + 1) * dk];
                                    qd.iter_mut().zip(krow).for_each(|(d, x)| *d += ds * x);
                                    let kd = &mut dkm
                                        [(ks + j) * qc + h * dk..(ks + j) * qc + (h + 1) * dk];
                                    kd.iter_mut().zip(qrow).for_each(|(d, x)| *d += ds * x);
                                }
                            }
                        }
                    }
                    acc(
                        &mut grads,
                        sa.q,
                        Tensor::from_parts(tq.shape().to_vec(), dq),
                    );
                    acc(
                        &mut grads,
                        sa.k,
                        Tensor::from_parts(tk.shape().to_vec(), dkm),
                    );
                    acc(
                        &mut grads,
                        sa.v,
                        Tensor::from_parts(tv.shape().to_vec(), dvm),
                    );
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Result of [`Tape::backward`]. Leaves the loss does not depend on get a
/// zero gradient.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(self.grads[v.idx]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx])))
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(self.grads[v.idx]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx])))
    }
}
