use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderContext, EncoderOutput};
use super::{positional_encoding, FeedForwardWeights, LnWeights, MemoryLayout, Model, ModelConfig, Pass};
use crate::analysis::{AttentionRecord, Stage};
use crate::attention::{captured_weights, make_causal_mask, make_padding_mask, AttentionMask, MultiHeadWeights};
use crate::data::{Batch, TokenGrid, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{AttnBlock, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayerWeights {
    pub self_attn: MultiHeadWeights,
    pub ln_self: LnWeights,
    pub cross_attn: MultiHeadWeights,
    pub ln_cross: LnWeights,
    pub ff: FeedForwardWeights,
    pub ln_ff: LnWeights,
}

impl DecoderLayerWeights {
    pub(crate) fn init(store: &mut ParamStore, p: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            self_attn: MultiHeadWeights::init(store, &format!("{p}.self"), d, cfg.heads, rng)?,
            ln_self: LnWeights::init(store, &format!("{p}.ln1"), d)?,
            cross_attn: MultiHeadWeights::init(store, &format!("{p}.cross"), d, cfg.heads, rng)?,
            ln_cross: LnWeights::init(store, &format!("{p}.ln2"), d)?,
            ff: FeedForwardWeights::init(store, &format!("{p}.ff"), d, cfg.d_ff, rng)?,
            ln_ff: LnWeights::init(store, &format!("{p}.ln3"), d)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[batch * len_tgt, vocab_tgt]`, one row per target position including
    /// decoder memory positions.
    pub logits: Var,
    pub batch: usize,
    pub len: usize,
}

impl Model {
    fn dec_labels(&self, row: &[usize]) -> Vec<String> {
        let mem_start = self.config.vocab_tgt - self.config.m_dec;
        row.iter()
            .map(|&id| {
                if id >= mem_start {
                    format!("[mem]{}", id - mem_start)
                } else {
                    id.to_string()
                }
            })
            .collect()
    }

    fn capture_dec(
        &self,
        pass: &mut Pass,
        heads: Var,
        stage: Stage,
        layer: usize,
        tgt: &TokenGrid,
        enc: &EncoderContext,
    ) {
        if !pass.capture {
            return;
        }
        let m_dec = self.config.m_dec.min(tgt.width);
        let rows = MemoryLayout::new(m_dec, tgt.width - m_dec);
        for (b, w) in captured_weights(&pass.tape, heads).into_iter().enumerate() {
            let (h, nq, nk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let row_labels = self.dec_labels(tgt.row(b));
            let (cols, col_labels) = match stage {
                Stage::DecCross => (enc.layout, enc.labels[b].clone()),
                _ => (rows, row_labels.clone()),
            };
            for head in 0..h {
                let weights = Tensor::new(&[nq, nk], w.data()[head * nq * nk..(head + 1) * nq * nk].to_vec())
                    .expect("head slice");
                pass.records.push(AttentionRecord {
                    stage,
                    layer,
                    head,
                    batch: b,
                    rows,
                    cols,
                    row_labels: row_labels.clone(),
                    col_labels: col_labels.clone(),
                    weights,
                });
            }
        }
    }

    /// Teacher-forced decoder pass: causal self-attention over the whole
    /// target (memory ids included), cross-attention over every encoder row.
    pub fn decode(&self, pass: &mut Pass, tgt_in: &TokenGrid, enc: &EncoderOutput) -> Result<DecoderOutput> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let (bsz, t) = (tgt_in.rows, tgt_in.width);
        if bsz != enc.ctx.batch {
            return Err(Error::dim("decode batch", &[bsz], &[enc.ctx.batch]));
        }
        if t == 0 {
            return Err(Error::contract("decode needs at least one target position"));
        }
        if t > cfg.max_len {
            return Err(Error::config(format!("target length {t} exceeds max_len {}", cfg.max_len)));
        }
        if let Some(&bad) = tgt_in.ids.iter().find(|&&i| i >= cfg.vocab_tgt) {
            return Err(Error::Index {
                what: "target token",
                index: bad,
                bound: cfg.vocab_tgt,
            });
        }
        let table = pass.tape.param(&self.params, self.weights.tgt_embed);
        let x = pass.tape.gather_rows(table, &tgt_in.ids)?;
        let x = pass.tape.scale(x, libm::sqrt(d as f64));
        let pe: Vec<f64> = (0..bsz).flat_map(|_| (0..t).flat_map(|p| positional_encoding(p, d))).collect();
        let pe = pass.tape.leaf(Tensor::new(&[bsz * t, d], pe)?);
        let mut x = pass.tape.add(x, pe)?;

        let causal = make_causal_mask(t)?;
        let l_enc = enc.ctx.layout.total();
        let mut self_blocks = Vec::with_capacity(bsz);
        let mut cross_blocks = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let pads = tgt_in.row_pad(b);
            let mask = if pads.iter().any(|&p| p) {
                causal.intersect(&make_padding_mask(pads, t, 0)?)?
            } else {
                causal.clone()
            };
            self_blocks.push(AttnBlock {
                q_start: b * t,
                q_len: t,
                k_start: b * t,
                k_len: t,
                allowed: AttentionMask::block_mask(Some(&mask)),
            });
            let enc_pads = &enc.ctx.key_pad[b * l_enc..(b + 1) * l_enc];
            let cross = if enc_pads.iter().any(|&p| p) {
                let m = make_padding_mask(enc_pads, t, enc.ctx.layout.m)?;
                AttentionMask::block_mask(Some(&m))
            } else {
                None
            };
            cross_blocks.push(AttnBlock {
                q_start: b * t,
                q_len: t,
                k_start: b * l_enc,
                k_len: l_enc,
                allowed: cross,
            });
        }

        let store = &self.params;
        let p = cfg.p_drop;
        for (i, w) in self.weights.decoder.iter().enumerate() {
            let (s, heads) = w.self_attn.forward(&mut pass.tape, store, x, x, self_blocks.clone())?;
            self.capture_dec(pass, heads, Stage::DecSelf, i, tgt_in, &enc.ctx);
            let s = pass.dropout(s, p)?;
            let r = pass.tape.add(x, s)?;
            let a1 = w.ln_self.apply(&mut pass.tape, store, r)?;
            let (c, heads) = w.cross_attn.forward(&mut pass.tape, store, a1, enc.out, cross_blocks.clone())?;
            self.capture_dec(pass, heads, Stage::DecCross, i, tgt_in, &enc.ctx);
            let c = pass.dropout(c, p)?;
            let r = pass.tape.add(a1, c)?;
            let a2 = w.ln_cross.apply(&mut pass.tape, store, r)?;
            let f = w.ff.apply(&mut pass.tape, store, a2)?;
            let f = pass.dropout(f, p)?;
            let r = pass.tape.add(a2, f)?;
            x = w.ln_ff.apply(&mut pass.tape, store, r)?;
        }
        let ow = pass.tape.param(store, self.weights.out_w);
        let ob = pass.tape.param(store, self.weights.out_b);
        let logits = pass.tape.linear(x, ow, Some(ob))?;
        Ok(DecoderOutput {
            logits,
            batch: bsz,
            len: t,
        })
    }

    /// Mean cross-entropy over every non-pad `tgt_out` position.
    pub fn loss(&self, pass: &mut Pass, batch: &Batch) -> Result<(Var, DecoderOutput)> {
        let enc = self.encode(pass, &batch.src)?;
        let dec = self.decode(pass, &batch.tgt_in, &enc)?;
        let loss = pass.tape.cross_entropy(dec.logits, &batch.tgt_out.ids, PAD)?;
        Ok((loss, dec))
    }

    /// Autoregressive argmax decoding: feeds the decoder memory ids and BOS,
    /// then appends the most likely token until EOS or `max_out` tokens.
    /// Returned sequences exclude memory ids, BOS and EOS.
    pub fn greedy_decode(&self, src: &[Vec<usize>], max_out: usize) -> Result<Vec<Vec<usize>>> {
        if src.is_empty() {
            return Ok(Vec::new());
        }
        if max_out == 0 {
            return Ok(vec![Vec::new(); src.len()]);
        }
        let mut pass = Pass::eval();
        let grid = TokenGrid::from_sequences(src);
        let enc = self.encode(&mut pass, &grid)?;
        let mut prefix = self.config.dec_mem_ids();
        prefix.push(BOS);
        let start = prefix.len();
        let mut seqs: Vec<Vec<usize>> = vec![prefix; src.len()];
        let mut done = vec![false; src.len()];
        let vocab = self.config.vocab_tgt;
        for _ in 0..max_out {
            let tgt = TokenGrid::from_sequences(&seqs);
            let dec = self.decode(&mut pass, &tgt, &enc)?;
            let logits = pass.tape.value(dec.logits).data();
            for (b, seq) in seqs.iter_mut().enumerate() {
                if done[b] {
                    seq.push(PAD);
                    continue;
                }
                let row = &logits[(b * dec.len + dec.len - 1) * vocab..(b * dec.len + dec.len) * vocab];
                let next = argmax(row);
                seq.push(next);
                done[b] = next == EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| s[start..].iter().copied().take_while(|&id| id != EOS && id != PAD).collect())
            .collect())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
