//! Scaled dot-product and multi-head attention with explicit masks.
//!
//! Disallowed logits receive [`MASK_SENTINEL`] before the softmax, so their
//! weights underflow to zero. A query row with no allowed key is rejected.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttnBlock, ParamId, ParamStore, Rng, Tape, Tensor, Var, MASK_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    None,
    Padding,
    Causal,
    CausalPadding,
}

/// Boolean `rows × cols` matrix; `true` means the query may attend the key.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
    kind: MaskKind,
}

impl AttentionMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
            kind: MaskKind::None,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, kind: MaskKind, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
            kind,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn allowed_per_row(&self) -> Vec<usize> {
        self.allowed
            .chunks(self.cols.max(1))
            .map(|r| r.iter().filter(|&&a| a).count())
            .collect()
    }

    /// Element-wise AND of two masks of the same shape.
    pub fn intersect(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::dim(
                "mask intersect",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        let kind = match (self.kind, other.kind) {
            (MaskKind::None, k) | (k, MaskKind::None) => k,
            (a, b) if a == b => a,
            _ => MaskKind::CausalPadding,
        };
        Ok(AttentionMask {
            rows: self.rows,
            cols: self.cols,
            allowed: self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect(),
            kind,
        })
    }

    /// Fails with the first query row that has no allowed key.
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.allowed_per_row().into_iter().enumerate() {
            if n == 0 {
                return Err(Error::contract(format!("query row {i} has every key masked")));
            }
        }
        Ok(())
    }

    pub(crate) fn block_mask(mask: Option<&AttentionMask>) -> Option<Vec<bool>> {
        mask.filter(|m| m.kind != MaskKind::None || m.allowed.iter().any(|a| !a))
            .map(|m| m.allowed.clone())
    }
}

/// `allowed[i][j] = j <= i`.
pub fn make_causal_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::contract("causal mask needs n >= 1"));
    }
    Ok(AttentionMask::from_fn(n, n, MaskKind::Causal, |i, j| j <= i))
}

/// Masks padded key columns for every one of `nq` query rows. The first
/// `mem_count` key columns are memory slots and can never be padding.
pub fn make_padding_mask(key_is_pad: &[bool], nq: usize, mem_count: usize) -> Result<AttentionMask> {
    if let Some(j) = key_is_pad.iter().take(mem_count).position(|&p| p) {
        return Err(Error::contract(format!("memory position {j} flagged as padding")));
    }
    Ok(AttentionMask::from_fn(nq, key_is_pad.len(), MaskKind::Padding, |_, j| {
        j < mem_count || !key_is_pad[j]
    }))
}

/// Single-head attention. Returns `(weights · v, weights)`.
///
/// Built from primitive tape ops (matmul, softmax), independent of the
/// fused kernel used by [`MultiHeadWeights`].
pub fn sdp_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor, Tensor)> {
    let (nq, dk) = q.rows_cols();
    let (nk, dk2) = k.rows_cols();
    if dk != dk2 || v.rows_cols().0 != nk {
        return Err(Error::dim("sdp_attention", q.shape(), k.shape()));
    }
    let mut bias = Tensor::zeros(&[nq, nk]);
    if let Some(m) = mask {
        if (m.rows, m.cols) != (nq, nk) {
            return Err(Error::dim("sdp_attention mask", &[m.rows, m.cols], &[nq, nk]));
        }
        m.validate()?;
        for (b, &a) in bias.data_mut().iter_mut().zip(&m.allowed) {
            if !a {
                *b = MASK_SENTINEL;
            }
        }
    }
    let mut t = Tape::new();
    let qv = t.leaf(q.clone());
    let kt = t.leaf(k.transpose2());
    let vv = t.leaf(v.clone());
    let bv = t.leaf(bias);
    let scores = t.matmul(qv, kt)?;
    let scaled = t.scale(scores, 1.0 / libm::sqrt(dk as f64));
    let logits = t.add(scaled, bv)?;
    let w = t.softmax(logits, 1)?;
    let out = t.matmul(w, vv)?;
    Ok((t.value(out).clone(), t.value(w).clone()))
}

/// Projection matrices of one multi-head attention sublayer (no biases).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl MultiHeadWeights {
    /// Registers `{prefix}.wq` .. `{prefix}.wo`, Xavier-uniform initialized.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config(format!(
                "d_model {d_model} not divisible by heads {heads}"
            )));
        }
        let mut mk = |name: &str| {
            store.add(&format!("{prefix}.{name}"), xavier(d_model, d_model, rng))
        };
        Ok(Self {
            wq: mk("wq")?,
            wk: mk("wk")?,
            wv: mk("wv")?,
            wo: mk("wo")?,
            heads,
        })
    }

    pub fn d_model(&self, store: &ParamStore) -> usize {
        store.value(self.wq).shape()[0]
    }

    /// Project, attend per block, concatenate heads, apply `W^O`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        blocks: Vec<AttnBlock>,
    ) -> Result<(Var, Var)> {
        let [wq, wk, wv, wo] = [self.wq, self.wk, self.wv, self.wo].map(|id| tape.param(store, id));
        let q = tape.linear(x_q, wq, None)?;
        let k = tape.linear(x_kv, wk, None)?;
        let v = tape.linear(x_kv, wv, None)?;
        let heads = tape.attention(q, k, v, self.heads, blocks)?;
        let out = tape.linear(heads, wo, None)?;
        Ok((out, heads))
    }
}

/// Eager multi-head attention over a single query/key block. Returns the
/// output `[nq, d_model]` and per-head weights `[h, nq, nk]`.
pub fn multi_head(
    x_q: &Tensor,
    x_kv: &Tensor,
    w: &MultiHeadWeights,
    store: &ParamStore,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor, Tensor)> {
    let d = w.d_model(store);
    let (nq, dq) = x_q.rows_cols();
    let (nk, dkv) = x_kv.rows_cols();
    if dq != d || dkv != d {
        return Err(Error::dim("multi_head", x_q.shape(), &[d, d]));
    }
    if let Some(m) = mask {
        if (m.rows, m.cols) != (nq, nk) {
            return Err(Error::dim("multi_head mask", &[m.rows, m.cols], &[nq, nk]));
        }
    }
    let mut t = Tape::new();
    let q = t.leaf(x_q.clone());
    let kv = t.leaf(x_kv.clone());
    let block = AttnBlock {
        q_start: 0,
        q_len: nq,
        k_start: 0,
        k_len: nk,
        allowed: AttentionMask::block_mask(mask),
    };
    let (out, heads) = w.forward(&mut t, store, q, kv, vec![block])?;
    let weights = captured_weights(&t, heads)
        .into_iter()
        .next()
        .expect("one block");
    Ok((t.value(out).clone(), weights))
}

/// Per-block `[h, q_len, k_len]` weight tensors of an attention node.
pub fn captured_weights(tape: &Tape, attn: Var) -> Vec<Tensor> {
    let Some((blocks, probs, heads)) = tape.attention_weights(attn) else {
        return Vec::new();
    };
    blocks
        .iter()
        .zip(probs)
        .map(|(b, p)| Tensor::new(&[heads, b.q_len, b.k_len], p.clone()).expect("block shape"))
        .collect()
}

/// Uniform Glorot initialization for a `[fan_in, fan_out]` matrix.
pub(crate) fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape")
}
