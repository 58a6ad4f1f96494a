//! Encoder-decoder stacks: the baseline Transformer and its memory variants.
//!
//! Memory tokens are learned embeddings prepended to the encoder input, so the
//! encoder works on `[X^mem; X^seq]` with `m + n` rows per batch element.
//! Variants differ only in how an encoder layer updates those rows:
//!
//! | variant               | memory rows                      | sequence rows                      |
//! |-----------------------|----------------------------------|------------------------------------|
//! | `baseline` / `mem`    | shared layer over all rows       | shared layer over all rows         |
//! | `mem_ctrl`            | own weights, keys = all rows     | own weights, keys = all rows       |
//! | `mem_ctrl_shared`     | one weight set for every layer   | per-layer weights, keys = all rows |
//! | `mem_bottleneck`      | own weights, keys = all rows     | keys = updated memory only         |
//! | `mem_bottleneck_skip` | own weights, keys = all rows     | passed through unchanged           |
//!
//! The decoder is a standard post-LayerNorm Transformer decoder whose cross
//! attention sees every encoder output row, memory included. Decoder memory
//! is a run of reserved target ids placed before BOS.

mod decoder;
mod encoder;
mod lesion;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::AttentionRecord;
use crate::attention::{xavier, MultiHeadWeights};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var, LN_EPS};

pub(crate) use decoder::argmax;
pub use decoder::{DecoderLayerWeights, DecoderOutput};
pub use encoder::{EncoderOutput, LayerActivations};
pub use lesion::lesion_memory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Mem,
    MemCtrl,
    MemCtrlShared,
    MemBottleneck,
    MemBottleneckSkip,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Mem,
        Variant::MemCtrl,
        Variant::MemCtrlShared,
        Variant::MemBottleneck,
        Variant::MemBottleneckSkip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Mem => "mem",
            Self::MemCtrl => "mem_ctrl",
            Self::MemCtrlShared => "mem_ctrl_shared",
            Self::MemBottleneck => "mem_bottleneck",
            Self::MemBottleneckSkip => "mem_bottleneck_skip",
        }
    }

    pub fn is_bottleneck(self) -> bool {
        matches!(self, Self::MemBottleneck | Self::MemBottleneckSkip)
    }

    pub fn uses_memory(self) -> bool {
        self != Self::Baseline
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Key/value source for the sequence update of a bottleneck layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKv {
    /// Memory as it entered the layer (`X^mem`).
    Pre,
    /// Memory after this layer's update (`H^mem`).
    #[default]
    Post,
}

impl FromStr for BottleneckKv {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Self::Pre),
            "post" => Ok(Self::Post),
            other => Err(Error::config(format!("unknown bottleneck_kv {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub p_drop: f64,
    pub m_enc: usize,
    pub m_dec: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub max_len: usize,
    pub pe_on_memory: bool,
    pub bottleneck_kv: BottleneckKv,
    pub seed: u64,
}

impl ModelConfig {
    /// The small translation configuration: 4+4 layers, `d_model = 128`,
    /// `d_ff = 512`, 8 heads, dropout 0.1.
    pub fn small(variant: Variant, vocab_src: usize, vocab_tgt: usize) -> Self {
        Self {
            variant,
            n_layers_enc: 4,
            n_layers_dec: 4,
            d_model: 128,
            d_ff: 512,
            heads: 8,
            p_drop: 0.1,
            m_enc: 0,
            m_dec: 0,
            vocab_src,
            vocab_tgt,
            max_len: 512,
            pe_on_memory: false,
            bottleneck_kv: BottleneckKv::Post,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::config(format!("p_drop {} outside [0, 1)", self.p_drop)));
        }
        if self.variant == Variant::Baseline && (self.m_enc != 0 || self.m_dec != 0) {
            return Err(Error::config("baseline requires m_enc == m_dec == 0"));
        }
        if self.variant.is_bottleneck() && self.m_enc == 0 {
            return Err(Error::config(format!(
                "{} requires m_enc >= 1",
                self.variant.name()
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.n_layers_enc == 0 || self.n_layers_dec == 0 {
            return Err(Error::config("layer counts and widths must be positive"));
        }
        if self.vocab_tgt <= self.m_dec + crate::data::RESERVED {
            return Err(Error::config("target vocabulary too small for its memory ids"));
        }
        if self.vocab_src <= crate::data::RESERVED {
            return Err(Error::config("source vocabulary too small"));
        }
        Ok(())
    }

    /// Target ids used as decoder memory tokens (top of the target range).
    pub fn dec_mem_ids(&self) -> Vec<usize> {
        (self.vocab_tgt - self.m_dec..self.vocab_tgt).collect()
    }
}

/// Where memory rows sit in a concatenated `[mem; seq]` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub m: usize,
    pub n: usize,
}

impl MemoryLayout {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }

    pub fn mem_range(&self) -> core::ops::Range<usize> {
        0..self.m
    }

    pub fn seq_range(&self) -> core::ops::Range<usize> {
        self.m..self.m + self.n
    }

    pub fn total(&self) -> usize {
        self.m + self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LnWeights {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LnWeights {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.add(&format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub(crate) fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// `Linear(d, d_ff) → ReLU → Linear(d_ff, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForwardWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardWeights {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w1: store.add(&format!("{prefix}.w1"), xavier(d, d_ff, rng))?,
            b1: store.add(&format!("{prefix}.b1"), Tensor::zeros(&[d_ff]))?,
            w2: store.add(&format!("{prefix}.w2"), xavier(d_ff, d, rng))?,
            b2: store.add(&format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
        })
    }

    pub(crate) fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = [self.w1, self.b1, self.w2, self.b2].map(|id| tape.param(store, id));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.relu(h);
        tape.linear(h, w2, Some(b2))
    }
}

/// Attention + feed-forward sublayers with their layer norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub attn: MultiHeadWeights,
    pub ln_attn: LnWeights,
    pub ff: FeedForwardWeights,
    pub ln_ff: LnWeights,
}

impl BlockWeights {
    fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadWeights::init(store, &format!("{prefix}.mha"), cfg.d_model, cfg.heads, rng)?,
            ln_attn: LnWeights::init(store, &format!("{prefix}.ln1"), cfg.d_model)?,
            ff: FeedForwardWeights::init(store, &format!("{prefix}.ff"), cfg.d_model, cfg.d_ff, rng)?,
            ln_ff: LnWeights::init(store, &format!("{prefix}.ln2"), cfg.d_model)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderLayerWeights {
    /// One block for memory and sequence rows alike.
    Standard(BlockWeights),
    /// Separate memory controller and sequence blocks.
    Split { mem: BlockWeights, seq: BlockWeights },
    /// Memory controller only; sequence rows pass through.
    MemoryOnly { mem: BlockWeights },
}

impl EncoderLayerWeights {
    pub fn memory_block(&self) -> Option<&BlockWeights> {
        match self {
            Self::Standard(_) => None,
            Self::Split { mem, .. } | Self::MemoryOnly { mem } => Some(mem),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    /// `[m_enc, d_model]`; absent for the baseline.
    pub mem_embed: Option<ParamId>,
    pub encoder: Vec<EncoderLayerWeights>,
    pub decoder: Vec<DecoderLayerWeights>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// A model: configuration, parameter values and the map from roles to them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub weights: ModelWeights,
}

/// Normal `N(0, d^-1/2)` rows, the embedding initialization.
pub(crate) fn embedding_rows(rows: usize, d: usize, rng: &mut Rng) -> Tensor {
    let std = 1.0 / libm::sqrt(d as f64);
    let data = (0..rows * d).map(|_| rng.normal() * std).collect();
    Tensor::new(&[rows, d], data).expect("shape")
}

impl Model {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, 0x1417, 0);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let src_embed = store.add("src.embed", embedding_rows(config.vocab_src, d, &mut rng))?;
        let tgt_embed = store.add("tgt.embed", embedding_rows(config.vocab_tgt, d, &mut rng))?;
        let mem_embed = if config.variant.uses_memory() {
            Some(store.add("enc.mem", embedding_rows(config.m_enc, d, &mut rng))?)
        } else {
            None
        };
        let shared = if config.variant == Variant::MemCtrlShared {
            Some(BlockWeights::init(&mut store, "enc.mem_ctrl", &config, &mut rng)?)
        } else {
            None
        };
        let mut encoder = Vec::with_capacity(config.n_layers_enc);
        for i in 0..config.n_layers_enc {
            let p = format!("enc.layer{i}");
            let layer = match config.variant {
                Variant::Baseline | Variant::Mem => {
                    EncoderLayerWeights::Standard(BlockWeights::init(&mut store, &p, &config, &mut rng)?)
                }
                Variant::MemCtrlShared => EncoderLayerWeights::Split {
                    mem: shared.expect("shared controller"),
                    seq: BlockWeights::init(&mut store, &format!("{p}.seq"), &config, &mut rng)?,
                },
                Variant::MemCtrl | Variant::MemBottleneck => EncoderLayerWeights::Split {
                    mem: BlockWeights::init(&mut store, &format!("{p}.mem"), &config, &mut rng)?,
                    seq: BlockWeights::init(&mut store, &format!("{p}.seq"), &config, &mut rng)?,
                },
                Variant::MemBottleneckSkip => EncoderLayerWeights::MemoryOnly {
                    mem: BlockWeights::init(&mut store, &format!("{p}.mem"), &config, &mut rng)?,
                },
            };
            encoder.push(layer);
        }
        let mut decoder = Vec::with_capacity(config.n_layers_dec);
        for i in 0..config.n_layers_dec {
            decoder.push(DecoderLayerWeights::init(&mut store, &format!("dec.layer{i}"), &config, &mut rng)?);
        }
        let out_w = store.add("out.w", xavier(d, config.vocab_tgt, &mut rng))?;
        let out_b = store.add("out.b", Tensor::zeros(&[config.vocab_tgt]))?;
        Ok(Self {
            config,
            params: store,
            weights: ModelWeights {
                src_embed,
                tgt_embed,
                mem_embed,
                encoder,
                decoder,
                out_w,
                out_b,
            },
        })
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    /// Returns the number of parameters copied.
    pub fn copy_matching_from(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        let ids: Vec<(ParamId, String)> = self.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            if let Some(src) = other.params.by_name(&name) {
                if src.value.shape() == self.params.value(id).shape() {
                    self.params.get_mut(id).value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// State of one forward pass: the tape, dropout randomness and attention
/// capture.
#[derive(Debug)]
pub struct Pass {
    pub tape: Tape,
    pub training: bool,
    pub capture: bool,
    pub rng: Rng,
    pub records: Vec<AttentionRecord>,
    /// Per encoder layer, a `[batch * m, d]` constant that replaces the
    /// updated memory `H^mem` (memory-controller variants only).
    pub memory_override: Option<Vec<Tensor>>,
}

impl Pass {
    pub fn eval() -> Self {
        Self {
            tape: Tape::new(),
            training: false,
            capture: false,
            rng: Rng::new(0),
            records: Vec::new(),
            memory_override: None,
        }
    }

    pub fn train(rng: Rng) -> Self {
        Self {
            training: true,
            rng,
            ..Self::eval()
        }
    }

    pub fn capturing() -> Self {
        Self {
            capture: true,
            ..Self::eval()
        }
    }

    pub(crate) fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.training, &mut self.rng)
    }
}

/// Sinusoidal positional encoding for one position.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / libm::pow(10_000.0, i2 / d as f64);
            if j % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            }
        })
        .collect()
}
