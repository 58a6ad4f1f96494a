use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{
    positional_encoding, BlockWeights, BottleneckKv, EncoderLayerWeights, MemoryLayout, Model, Pass,
    Variant,
};
use crate::analysis::{AttentionRecord, Stage};
use crate::attention::{captured_weights, make_padding_mask, AttentionMask};
use crate::data::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{AttnBlock, ParamStore, Tensor, Var};

/// Batch geometry shared by every encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderContext {
    pub batch: usize,
    pub layout: MemoryLayout,
    /// `batch × (m + n)` flags; memory slots are never padding.
    pub key_pad: Vec<bool>,
    /// Row labels per batch element: `[mem]k` then the token ids.
    pub labels: Vec<Vec<String>>,
    pub p_drop: f64,
}

impl EncoderContext {
    fn rows(&self) -> usize {
        self.layout.total()
    }

    fn pad_mask(&self, b: usize, query_rows: usize) -> Result<Option<Vec<bool>>> {
        let l = self.rows();
        let pads = &self.key_pad[b * l..(b + 1) * l];
        if !pads.iter().any(|&p| p) {
            return Ok(None);
        }
        let mask = make_padding_mask(pads, query_rows, self.layout.m)?;
        Ok(AttentionMask::block_mask(Some(&mask)))
    }

    /// Queries and keys are both the full `[mem; seq]` block.
    fn full_blocks(&self) -> Result<Vec<AttnBlock>> {
        let l = self.rows();
        (0..self.batch)
            .map(|b| {
                Ok(AttnBlock {
                    q_start: b * l,
                    q_len: l,
                    k_start: b * l,
                    k_len: l,
                    allowed: self.pad_mask(b, l)?,
                })
            })
            .collect()
    }

    /// Queries from a compact `[batch * rows, d]` stream, keys over the full block.
    fn stream_blocks(&self, rows: usize) -> Result<Vec<AttnBlock>> {
        let l = self.rows();
        (0..self.batch)
            .map(|b| {
                Ok(AttnBlock {
                    q_start: b * rows,
                    q_len: rows,
                    k_start: b * l,
                    k_len: l,
                    allowed: self.pad_mask(b, rows)?,
                })
            })
            .collect()
    }

    /// Sequence queries over memory keys only.
    fn read_blocks(&self) -> Vec<AttnBlock> {
        let (m, n) = (self.layout.m, self.layout.n);
        (0..self.batch)
            .map(|b| AttnBlock {
                q_start: b * n,
                q_len: n,
                k_start: b * m,
                k_len: m,
                allowed: None,
            })
            .collect()
    }

    fn mem_index(&self) -> Vec<usize> {
        let l = self.rows();
        (0..self.batch)
            .flat_map(|b| (0..self.layout.m).map(move |i| b * l + i))
            .collect()
    }

    fn seq_index(&self) -> Vec<usize> {
        let (l, m) = (self.rows(), self.layout.m);
        (0..self.batch)
            .flat_map(|b| (0..self.layout.n).map(move |t| b * l + m + t))
            .collect()
    }

    /// Rows of `concat(mem_stream, seq_stream)` back in `[mem; seq]` order.
    fn interleave_index(&self) -> Vec<usize> {
        let (m, n, bsz) = (self.layout.m, self.layout.n, self.batch);
        (0..bsz)
            .flat_map(|b| (0..m).map(move |i| b * m + i).chain((0..n).map(move |t| bsz * m + b * n + t)))
            .collect()
    }
}

/// Variables produced by one encoder layer. `out` is the full `[mem; seq]`
/// output; the stream-specific values are present when the variant computes
/// them separately.
#[derive(Debug, Clone, Copy)]
pub struct LayerActivations {
    pub out: Var,
    pub a_mem: Option<Var>,
    pub h_mem: Option<Var>,
    pub a_seq: Option<Var>,
    pub h_seq: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[batch * (m + n), d_model]`, memory rows first within each element.
    pub out: Var,
    pub ctx: EncoderContext,
    pub layers: Vec<LayerActivations>,
}

/// `A = LN(x_q + drop(MH(x_q, x_kv))); H = LN(A + drop(FF(A)))`.
fn block(
    pass: &mut Pass,
    store: &ParamStore,
    w: &BlockWeights,
    x_q: Var,
    x_kv: Var,
    blocks: Vec<AttnBlock>,
    p_drop: f64,
) -> Result<(Var, Var, Var)> {
    let (att, heads) = w.attn.forward(&mut pass.tape, store, x_q, x_kv, blocks)?;
    let att = pass.dropout(att, p_drop)?;
    let res = pass.tape.add(x_q, att)?;
    let a = w.ln_attn.apply(&mut pass.tape, store, res)?;
    let f = w.ff.apply(&mut pass.tape, store, a)?;
    let f = pass.dropout(f, p_drop)?;
    let res = pass.tape.add(a, f)?;
    let h = w.ln_ff.apply(&mut pass.tape, store, res)?;
    Ok((a, h, heads))
}

/// Which slice of each element's labels a record's rows or columns cover.
#[derive(Clone, Copy)]
enum Span {
    All,
    Mem,
    Seq,
}

impl Span {
    fn layout(self, l: MemoryLayout) -> MemoryLayout {
        match self {
            Span::All => l,
            Span::Mem => MemoryLayout::new(l.m, 0),
            Span::Seq => MemoryLayout::new(0, l.n),
        }
    }

    fn labels(self, labels: &[String], m: usize) -> Vec<String> {
        match self {
            Span::All => labels.to_vec(),
            Span::Mem => labels[..m].to_vec(),
            Span::Seq => labels[m..].to_vec(),
        }
    }
}

fn capture(pass: &mut Pass, heads: Var, ctx: &EncoderContext, stage: Stage, layer: usize, rows: Span, cols: Span) {
    if !pass.capture {
        return;
    }
    let m = ctx.layout.m;
    for (b, w) in captured_weights(&pass.tape, heads).into_iter().enumerate() {
        let (h, nq, nk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        for head in 0..h {
            let weights = Tensor::new(&[nq, nk], w.data()[head * nq * nk..(head + 1) * nq * nk].to_vec())
                .expect("head slice");
            pass.records.push(AttentionRecord {
                stage,
                layer,
                head,
                batch: b,
                rows: rows.layout(ctx.layout),
                cols: cols.layout(ctx.layout),
                row_labels: rows.labels(&ctx.labels[b], m),
                col_labels: cols.labels(&ctx.labels[b], m),
                weights,
            });
        }
    }
}

/// Standard Transformer layer over the whole concatenation (baseline and
/// MemTransformer).
pub fn encoder_layer(
    pass: &mut Pass,
    store: &ParamStore,
    w: &BlockWeights,
    x: Var,
    ctx: &EncoderContext,
    layer: usize,
) -> Result<LayerActivations> {
    let (_, h, heads) = block(pass, store, w, x, x, ctx.full_blocks()?, ctx.p_drop)?;
    capture(pass, heads, ctx, Stage::EncSelf, layer, Span::All, Span::All);
    Ok(LayerActivations {
        out: h,
        a_mem: None,
        h_mem: None,
        a_seq: None,
        h_seq: None,
    })
}

fn memory_update(
    pass: &mut Pass,
    store: &ParamStore,
    w_mem: &BlockWeights,
    x: Var,
    x_mem: Var,
    ctx: &EncoderContext,
    layer: usize,
) -> Result<(Var, Var)> {
    let (a_mem, h_mem, heads) = block(pass, store, w_mem, x_mem, x, ctx.stream_blocks(ctx.layout.m)?, ctx.p_drop)?;
    capture(pass, heads, ctx, Stage::EncMemStream, layer, Span::Mem, Span::All);
    let h_mem = match pass.memory_override.as_ref().and_then(|o| o.get(layer)) {
        Some(t) => {
            let want = [ctx.batch * ctx.layout.m, pass.tape.value(x).rows_cols().1];
            if t.shape() != want {
                return Err(Error::dim("memory override", t.shape(), &want));
            }
            pass.tape.leaf(t.clone())
        }
        None => h_mem,
    };
    Ok((a_mem, h_mem))
}

fn reassemble(pass: &mut Pass, h_mem: Var, h_seq: Var, ctx: &EncoderContext) -> Result<Var> {
    let both = pass.tape.concat_rows(&[h_mem, h_seq])?;
    pass.tape.gather_rows(both, &ctx.interleave_index())
}

/// MemCtrl layer: memory rows use the controller block, sequence rows their
/// own block; both attend over the full concatenation.
pub fn mem_ctrl_layer(
    pass: &mut Pass,
    store: &ParamStore,
    w_mem: &BlockWeights,
    w_seq: &BlockWeights,
    x: Var,
    ctx: &EncoderContext,
    layer: usize,
) -> Result<LayerActivations> {
    let x_mem = pass.tape.gather_rows(x, &ctx.mem_index())?;
    let x_seq = pass.tape.gather_rows(x, &ctx.seq_index())?;
    let (a_mem, h_mem) = memory_update(pass, store, w_mem, x, x_mem, ctx, layer)?;
    let (a_seq, h_seq, heads) = block(pass, store, w_seq, x_seq, x, ctx.stream_blocks(ctx.layout.n)?, ctx.p_drop)?;
    capture(pass, heads, ctx, Stage::EncSeqStream, layer, Span::Seq, Span::All);
    let out = reassemble(pass, h_mem, h_seq, ctx)?;
    Ok(LayerActivations {
        out,
        a_mem: Some(a_mem),
        h_mem: Some(h_mem),
        a_seq: Some(a_seq),
        h_seq: Some(h_seq),
    })
}

/// MemBottleneck layer: memory attends to everything, then the sequence
/// attends to memory only (`H^mem` or `X^mem` per `kv`).
#[allow(clippy::too_many_arguments)]
pub fn mem_bottleneck_layer(
    pass: &mut Pass,
    store: &ParamStore,
    w_mem: &BlockWeights,
    w_seq: &BlockWeights,
    x: Var,
    ctx: &EncoderContext,
    layer: usize,
    kv: BottleneckKv,
) -> Result<LayerActivations> {
    if ctx.layout.m == 0 {
        return Err(Error::config("memory bottleneck needs at least one memory token"));
    }
    let x_mem = pass.tape.gather_rows(x, &ctx.mem_index())?;
    let x_seq = pass.tape.gather_rows(x, &ctx.seq_index())?;
    let (a_mem, h_mem) = memory_update(pass, store, w_mem, x, x_mem, ctx, layer)?;
    let source = match kv {
        BottleneckKv::Post => h_mem,
        BottleneckKv::Pre => x_mem,
    };
    let (a_seq, h_seq, heads) = block(pass, store, w_seq, x_seq, source, ctx.read_blocks(), ctx.p_drop)?;
    capture(pass, heads, ctx, Stage::EncSeqStream, layer, Span::Seq, Span::Mem);
    let out = reassemble(pass, h_mem, h_seq, ctx)?;
    Ok(LayerActivations {
        out,
        a_mem: Some(a_mem),
        h_mem: Some(h_mem),
        a_seq: Some(a_seq),
        h_seq: Some(h_seq),
    })
}

/// MemBottleneck Skip layer: memory update only, sequence rows unchanged.
pub fn mem_bottleneck_skip_layer(
    pass: &mut Pass,
    store: &ParamStore,
    w_mem: &BlockWeights,
    x: Var,
    ctx: &EncoderContext,
    layer: usize,
) -> Result<LayerActivations> {
    if ctx.layout.m == 0 {
        return Err(Error::config("memory bottleneck needs at least one memory token"));
    }
    let x_mem = pass.tape.gather_rows(x, &ctx.mem_index())?;
    let x_seq = pass.tape.gather_rows(x, &ctx.seq_index())?;
    let (a_mem, h_mem) = memory_update(pass, store, w_mem, x, x_mem, ctx, layer)?;
    let out = reassemble(pass, h_mem, x_seq, ctx)?;
    Ok(LayerActivations {
        out,
        a_mem: Some(a_mem),
        h_mem: Some(h_mem),
        a_seq: None,
        h_seq: Some(x_seq),
    })
}

impl Model {
    pub fn memory_size(&self) -> usize {
        self.weights
            .mem_embed
            .map_or(0, |id| self.params.value(id).shape()[0])
    }

    /// Token embeddings (scaled by `sqrt(d_model)`) plus sinusoidal positions,
    /// with the learned memory rows prepended to every batch element.
    pub fn embed_and_position(&self, pass: &mut Pass, src: &TokenGrid) -> Result<(Var, MemoryLayout)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let m = self.memory_size();
        let n = src.width;
        if m + n > cfg.max_len {
            return Err(Error::config(format!(
                "sequence of {n} tokens plus {m} memory rows exceeds max_len {}",
                cfg.max_len
            )));
        }
        if let Some(&bad) = src.ids.iter().find(|&&i| i >= cfg.vocab_src) {
            return Err(Error::Index {
                what: "source token",
                index: bad,
                bound: cfg.vocab_src,
            });
        }
        let offset = if cfg.pe_on_memory { m } else { 0 };
        let table = pass.tape.param(&self.params, self.weights.src_embed);
        let tok = pass.tape.gather_rows(table, &src.ids)?;
        let tok = pass.tape.scale(tok, libm::sqrt(d as f64));
        let mut pe = Vec::with_capacity(src.ids.len() * d);
        for _ in 0..src.rows {
            for t in 0..n {
                pe.extend(positional_encoding(offset + t, d));
            }
        }
        let pe = pass.tape.leaf(Tensor::new(&[src.ids.len(), d], pe)?);
        let tok = pass.tape.add(tok, pe)?;
        let layout = MemoryLayout::new(m, n);
        let Some(mem_id) = self.weights.mem_embed else {
            return Ok((tok, layout));
        };
        let mut mem = pass.tape.param(&self.params, mem_id);
        if cfg.pe_on_memory && m > 0 {
            let pe: Vec<f64> = (0..m).flat_map(|p| positional_encoding(p, d)).collect();
            let pe = pass.tape.leaf(Tensor::new(&[m, d], pe)?);
            mem = pass.tape.add(mem, pe)?;
        }
        let both = pass.tape.concat_rows(&[mem, tok])?;
        let idx: Vec<usize> = (0..src.rows)
            .flat_map(|b| (0..m).chain((0..n).map(move |t| m + b * n + t)))
            .collect();
        Ok((pass.tape.gather_rows(both, &idx)?, layout))
    }

    pub(crate) fn encoder_context(&self, src: &TokenGrid, layout: MemoryLayout) -> EncoderContext {
        let m = layout.m;
        let mut key_pad = Vec::with_capacity(src.rows * layout.total());
        let mut labels = Vec::with_capacity(src.rows);
        for b in 0..src.rows {
            key_pad.extend(core::iter::repeat_n(false, m));
            key_pad.extend_from_slice(src.row_pad(b));
            let mut l: Vec<String> = (0..m).map(|k| format!("[mem]{k}")).collect();
            l.extend(src.row(b).iter().map(|id| id.to_string()));
            labels.push(l);
        }
        EncoderContext {
            batch: src.rows,
            layout,
            key_pad,
            labels,
            p_drop: self.config.p_drop,
        }
    }

    /// Runs the whole encoder; the output keeps the memory rows.
    pub fn encode(&self, pass: &mut Pass, src: &TokenGrid) -> Result<EncoderOutput> {
        if src.rows == 0 || src.width == 0 {
            return Err(Error::contract("encode needs a non-empty token sequence"));
        }
        let (mut x, layout) = self.embed_and_position(pass, src)?;
        let ctx = self.encoder_context(src, layout);
        let mut layers = Vec::with_capacity(self.weights.encoder.len());
        for (i, lw) in self.weights.encoder.iter().enumerate() {
            let act = self.encoder_layer_at(pass, lw, x, &ctx, i)?;
            x = act.out;
            layers.push(act);
        }
        Ok(EncoderOutput { out: x, ctx, layers })
    }

    pub(crate) fn encoder_layer_at(
        &self,
        pass: &mut Pass,
        lw: &EncoderLayerWeights,
        x: Var,
        ctx: &EncoderContext,
        i: usize,
    ) -> Result<LayerActivations> {
        let store = &self.params;
        match (self.config.variant, lw) {
            (_, EncoderLayerWeights::Standard(w)) => encoder_layer(pass, store, w, x, ctx, i),
            (Variant::MemBottleneck, EncoderLayerWeights::Split { mem, seq }) => {
                mem_bottleneck_layer(pass, store, mem, seq, x, ctx, i, self.config.bottleneck_kv)
            }
            (_, EncoderLayerWeights::Split { mem, seq }) => mem_ctrl_layer(pass, store, mem, seq, x, ctx, i),
            (_, EncoderLayerWeights::MemoryOnly { mem }) => mem_bottleneck_skip_layer(pass, store, mem, x, ctx, i),
        }
    }
}
