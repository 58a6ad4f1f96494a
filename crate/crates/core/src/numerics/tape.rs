//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. [`Tape::backward`] walks the nodes in reverse
//! and returns a [`Gradients`] table; [`Gradients::accumulate_into`] adds the
//! parameter gradients to a [`ParamStore`]. Gradients accumulate until
//! [`ParamStore::zero_grad`] is called.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{add_assign, gemm, softmax_axis, softmax_row, View};
use super::{ParamId, ParamStore, Rng, Tensor};
use crate::error::{Error, Result};

/// Additive logit bias applied to disallowed attention positions.
pub const MASK_SENTINEL: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// One query/key pairing inside a fused attention call.
///
/// Queries are rows `q_start..q_start + q_len` of the query tensor, keys and
/// values rows `k_start..k_start + k_len` of the key/value tensors. `allowed`
/// is a row-major `q_len × k_len` mask (`true` = may attend).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub allowed: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttnBlock>,
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        count: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input. Its gradient is still reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Brings a parameter onto the tape. Repeated calls for the same id
    /// return the same node, so shared parameters accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Matrix product over the last two axes. `a` is `[.., m, k]`; `b` is
    /// either `[k, n]` (shared across the batch) or `[.., k, n]` with the
    /// same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_shared = lead_b.is_empty();
        if k != kb || !(b_shared || lead_a == lead_b) {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let boff = if b_shared { 0 } else { bi * k * n };
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    View::rows(&ad[bi * m * k..], k),
                    View::rows(&bd[boff..], n),
                    0.0,
                    &mut out[bi * m * n..],
                    n,
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            },
        ))
    }

    /// `x · w + b` with `x` viewed as `[rows, din]`, `w` as `[din, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != din {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let dout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = if din == 0 { 0 } else { self.value(x).numel() / din };
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in out.chunks_mut(dout.max(1)) {
                r.copy_from_slice(bd);
            }
        }
        gemm(
            rows,
            din,
            dout,
            1.0,
            View::rows(self.value(x).data(), din),
            View::rows(self.value(w).data(), dout),
            1.0,
            &mut out,
            dout,
        );
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(dout);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a), data).expect("same numel");
        self.push(value, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(self.shape(a), data).expect("same numel");
        self.push(value, Op::Relu(a))
    }

    /// Softmax along `axis`, computed with the axis maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = softmax_axis(self.value(x).data(), outer, len, inner);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias` over the last
    /// axis, with the biased variance estimator.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(x).rows_cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
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
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` at train time;
    /// evaluation (or `p == 0`) is the identity and adds no node.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Selects rows of a 2-D tensor (indices may repeat).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(src).rows_cols();
        let sd = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&sd[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Stacks 2-D tensors with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let c = self.value(first).rows_cols().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).rows_cols();
            if pc != c && r != 0 {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::new(&[rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q` is `[Nq, d]`, `k` and `v` are `[Nk, d]`; the feature axis is split
    /// into `heads` contiguous blocks of width `d / heads`. Each [`AttnBlock`]
    /// attends its query rows to its key rows independently. Query rows not
    /// covered by any block are left at zero. Returns `[Nq, d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttnBlock>,
    ) -> Result<Var> {
        let (nq_total, d) = self.value(q).rows_cols();
        let (nk_total, dk_) = self.value(k).rows_cols();
        if dk_ != d || self.shape(k) != self.shape(v) {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = vec![0.0; nq_total * d];
        let mut probs = Vec::with_capacity(blocks.len());
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            for blk in &blocks {
                if blk.q_start + blk.q_len > nq_total || blk.k_start + blk.k_len > nk_total {
                    return Err(Error::contract("attention block outside its tensors"));
                }
                let (nq, nk) = (blk.q_len, blk.k_len);
                if let Some(mask) = &blk.allowed {
                    if mask.len() != nq * nk {
                        return Err(Error::dim("attention mask", &[mask.len()], &[nq, nk]));
                    }
                    for i in 0..nq {
                        if !mask[i * nk..(i + 1) * nk].iter().any(|&a| a) {
                            return Err(Error::contract(format!(
                                "query row {i} has every key masked"
                            )));
                        }
                    }
                } else if nk == 0 && nq > 0 {
                    return Err(Error::contract("attention over zero keys"));
                }
                let mut p = vec![0.0; heads * nq * nk];
                for h in 0..heads {
                    let ph = &mut p[h * nq * nk..(h + 1) * nq * nk];
                    gemm(
                        nq,
                        dh,
                        nk,
                        scale,
                        View::rows(&qd[blk.q_start * d + h * dh..], d),
                        View::cols(&kd[blk.k_start * d + h * dh..], d),
                        0.0,
                        ph,
                        nk,
                    );
                    if let Some(mask) = &blk.allowed {
                        for (s, &a) in ph.iter_mut().zip(mask) {
                            if !a {
                                *s += MASK_SENTINEL;
                            }
                        }
                    }
                    for row in ph.chunks_mut(nk.max(1)) {
                        softmax_row(row);
                    }
                    gemm(
                        nq,
                        nk,
                        dh,
                        1.0,
                        View::rows(ph, nk),
                        View::rows(&vd[blk.k_start * d + h * dh..], d),
                        0.0,
                        &mut out[blk.q_start * d + h * dh..],
                        d,
                    );
                }
                probs.push(p);
            }
        }
        let value = Tensor::new(&[nq_total, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, one
    /// `heads × q_len × k_len` buffer per block.
    pub fn attention_weights(&self, v: Var) -> Option<(&[AttnBlock], &[Vec<f64>], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                blocks,
                probs,
                heads,
                ..
            } => Some((blocks, probs, *heads)),
            _ => None,
        }
    }

    /// Mean of `-log softmax(logits)[target]` over rows whose target is not
    /// `ignore`. A batch where every row is ignored has loss 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (n, vocab) = self.value(logits).rows_cols();
        if self.value(logits).ndim() != 2 || targets.len() != n {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            total += lse - row[t];
            softmax_row(row);
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; self.nodes[b.0].value.numel()];
                for bi in 0..*batch {
                    let boff = if *b_shared { 0 } else { bi * k * n };
                    let gb = &g[bi * m * n..];
                    // dA = G · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::rows(gb, n),
                        View::cols(&val(*b)[boff..], n),
                        0.0,
                        &mut da[bi * m * k..],
                        k,
                    );
                    // dB += Aᵀ · G
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::cols(&val(*a)[bi * m * k..], k),
                        View::rows(gb, n),
                        1.0,
                        &mut db[boff..],
                        n,
                    );
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                let mut dx = vec![0.0; rows * din];
                gemm(
                    rows,
                    dout,
                    din,
                    1.0,
                    View::rows(g, dout),
                    View::cols(val(*w), dout),
                    0.0,
                    &mut dx,
                    din,
                );
                let mut dw = vec![0.0; din * dout];
                gemm(
                    din,
                    rows,
                    dout,
                    1.0,
                    View::cols(val(*x), din),
                    View::rows(g, dout),
                    0.0,
                    &mut dw,
                    dout,
                );
                accumulate(grads, *x, &dx);
                accumulate(grads, *w, &dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for r in g.chunks(dout.max(1)) {
                        add_assign(&mut db, r);
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|g| g * c).collect();
                accumulate(grads, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.nodes[a.0].value.numel()];
                accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for j in 0..*inner {
                        let at = |t: usize| (o * len + t) * inner + j;
                        let dot: f64 = (0..*len).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..*len {
                            dx[at(t)] = y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].value.numel();
                let gd = val(*gain);
                let rows = rstd.len();
                let mut dx = vec![0.0; rows * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gd[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gain, &dg);
                accumulate(grads, *bias, &db);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, &dx);
            }
            Op::GatherRows { src, idx } => {
                let c = node.value.rows_cols().1;
                let mut ds = vec![0.0; self.nodes[src.0].value.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    add_assign(&mut ds[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
                accumulate(grads, *src, &ds);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    accumulate(grads, *p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let d = node.value.rows_cols().1;
                let dh = d / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                for (blk, p) in blocks.iter().zip(probs) {
                    let (nq, nk) = (blk.q_len, blk.k_len);
                    let mut ds = vec![0.0; nq * nk];
                    for h in 0..*heads {
                        let ph = &p[h * nq * nk..(h + 1) * nq * nk];
                        let go = &g[blk.q_start * d + h * dh..];
                        // dV += Pᵀ · dO
                        gemm(
                            nk,
                            nq,
                            dh,
                            1.0,
                            View::cols(ph, nk),
                            View::rows(go, d),
                            1.0,
                            &mut dv[blk.k_start * d + h * dh..],
                            d,
                        );
                        // dP = dO · Vᵀ
                        gemm(
                            nq,
                            dh,
                            nk,
                            1.0,
                            View::rows(go, d),
                            View::cols(&vd[blk.k_start * d + h * dh..], d),
                            0.0,
                            &mut ds,
                            nk,
                        );
                        for (srow, prow) in ds.chunks_mut(nk.max(1)).zip(ph.chunks(nk.max(1))) {
                            let dot: f64 = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (s, pv) in srow.iter_mut().zip(prow) {
                                *s = pv * (*s - dot);
                            }
                        }
                        gemm(
                            nq,
                            nk,
                            dh,
                            scale,
                            View::rows(&ds, nk),
                            View::rows(&kd[blk.k_start * d + h * dh..], d),
                            1.0,
                            &mut dq[blk.q_start * d + h * dh..],
                            d,
                        );
                        gemm(
                            nk,
                            nq,
                            dh,
                            scale,
                            View::cols(&ds, nk),
                            View::rows(&qd[blk.q_start * d + h * dh..], d),
                            1.0,
                            &mut dk[blk.k_start * d + h * dh..],
                            d,
                        );
                    }
                }
                accumulate(grads, *q, &dq);
                accumulate(grads, *k, &dk);
                accumulate(grads, *v, &dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
                probs,
            } => {
                let vocab = self.nodes[logits.0].value.rows_cols().1;
                let mut dl = vec![0.0; probs.len()];
                if *count > 0 {
                    let s = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..vocab {
                            dl[r * vocab + j] = s * probs[r * vocab + j];
                        }
                        dl[r * vocab + t] -= s;
                    }
                }
                accumulate(grads, *logits, &dl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => add_assign(acc, g),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, node) in tape.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                add_assign(store.get_mut(*id).grad.data_mut(), g);
            }
        }
    }
}
