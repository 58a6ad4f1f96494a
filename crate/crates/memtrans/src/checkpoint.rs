//! Checkpoint directories.
//!
//! ```text
//! manifest.json  config, vocabularies, step, parameter index
//! params.bin     little-endian f32 values, parameters in index order
//! optim.bin      little-endian f64: master parameters, then Adam m, then v
//! ```
//!
//! `params.bin` is the portable copy. Loading prefers the 64-bit masters in
//! `optim.bin`, so a reloaded model computes exactly what the saved one did
//! and resumed training matches an uninterrupted run.

use std::fs;
use std::path::{Path, PathBuf};

use memtrans_core::data::{TaskKind, Vocab, VocabMode, RESERVED};
use memtrans_core::models::{Model, ModelConfig};
use memtrans_core::training::{AdamState, TrainConfig};
use memtrans_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

pub const FORMAT: &str = "memtrans-checkpoint-v1";
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const OPTIM: &str = "optim.bin";

/// What the model was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Task {
        task: TaskKind,
        len_min: usize,
        len_max: usize,
        vocab_size: usize,
    },
    Corpus {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimIndex {
    pub dtype: String,
    /// Total scalars per section; sections are master, m, v.
    pub scalars: u64,
    /// Adam step count, absent when no optimizer state was saved.
    pub adam_t: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub dropout_stream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub train: Option<TrainConfig>,
    pub data: Option<DataSpec>,
    pub vocab_mode: VocabMode,
    pub vocab_src: Vec<String>,
    pub vocab_tgt: Vec<String>,
    pub vocab_tgt_mem: usize,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<ParamEntry>,
    pub optim: OptimIndex,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_src: Vocab,
    pub vocab_tgt: Vocab,
    pub vocab_mode: VocabMode,
    pub step: u64,
    pub train: Option<TrainConfig>,
    pub adam: Option<AdamState>,
    pub data: Option<DataSpec>,
}

impl Checkpoint {
    /// An untrained checkpoint: step 0, no optimizer state, no data record.
    pub fn for_model(model: Model, vocab_src: Vocab, vocab_tgt: Vocab, vocab_mode: VocabMode) -> Self {
        Self {
            model,
            vocab_src,
            vocab_tgt,
            vocab_mode,
            step: 0,
            train: None,
            adam: None,
            data: None,
        }
    }

    fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let params = self
            .model
            .params
            .iter()
            .map(|(_, p)| {
                let e = ParamEntry {
                    name: p.name.clone(),
                    dtype: "f32".into(),
                    shape: p.value.shape().to_vec(),
                    offset,
                };
                offset += 4 * p.value.numel() as u64;
                e
            })
            .collect();
        let seed = self.train.as_ref().map_or(self.model.config.seed, |t| t.seed);
        Manifest {
            format: FORMAT.into(),
            config: self.model.config.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
            vocab_mode: self.vocab_mode,
            vocab_src: self.vocab_src.tokens().to_vec(),
            vocab_tgt: self.vocab_tgt.tokens().to_vec(),
            vocab_tgt_mem: self.vocab_tgt.mem_count(),
            step: self.step,
            rng: RngState {
                algorithm: "xoshiro256**".into(),
                seed,
                dropout_stream: format!("derive(seed, purpose, step), next step {}", self.step),
            },
            params,
            optim: OptimIndex {
                dtype: "f64".into(),
                scalars: self.model.params.num_scalars() as u64,
                adam_t: self.adam.as_ref().map(|a| a.t),
            },
        }
    }

    /// The three files' contents.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        let manifest = serde_json::to_vec_pretty(&self.manifest())
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        let n = self.model.params.num_scalars();
        let mut params = Vec::with_capacity(4 * n);
        let mut optim = Vec::with_capacity(8 * 3 * n);
        for (_, p) in self.model.params.iter() {
            for &v in p.value.data() {
                params.extend_from_slice(&(v as f32).to_le_bytes());
                optim.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(adam) = &self.adam {
            for section in [&adam.m, &adam.v] {
                for vals in section {
                    for v in vals {
                        optim.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok((manifest, params, optim))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let (manifest, params, optim) = self.encode()?;
        for (name, bytes) in [(PARAMS, &params), (OPTIM, &optim), (MANIFEST, &manifest)] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(Error::io(path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(Error::io(path))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST)?)
            .map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::format("checkpoint manifest", format!("unknown format {:?}", manifest.format)));
        }
        let params = read(PARAMS)?;
        let optim = read(OPTIM)?;
        let mut model = Model::new(manifest.config.clone())?;
        if manifest.params.len() != model.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} parameters stored, model has {}", manifest.params.len(), model.params.len()),
            ));
        }
        let total = model.params.num_scalars();
        if manifest.optim.scalars as usize != total {
            return Err(Error::format("checkpoint", "optimizer index does not match the model"));
        }
        let want_optim = 8 * total * if manifest.optim.adam_t.is_some() { 3 } else { 1 };
        if optim.len() != want_optim {
            return Err(Error::format("optim.bin", format!("{} bytes, expected {want_optim}", optim.len())));
        }
        if params.len() != 4 * total {
            return Err(Error::format("params.bin", format!("{} bytes, expected {}", params.len(), 4 * total)));
        }
        let f64_at = |i: usize| f64::from_le_bytes(optim[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        let mut master = 0usize;
        let mut sizes = Vec::with_capacity(manifest.params.len());
        let current: Vec<_> = model.params.iter().map(|(id, p)| (id, p.clone())).collect();
        for (entry, (id, p)) in manifest.params.iter().zip(current) {
            if entry.name != p.name || entry.shape != p.value.shape() || entry.dtype != "f32" {
                return Err(Error::format(
                    "checkpoint",
                    format!("parameter {} {:?} does not match model parameter {} {:?}", entry.name, entry.shape, p.name, p.value.shape()),
                ));
            }
            let n = p.value.numel();
            let off = entry.offset as usize;
            if off != 4 * master {
                return Err(Error::format("checkpoint", format!("unexpected offset for {}", entry.name)));
            }
            let mut vals = Vec::with_capacity(n);
            for k in 0..n {
                let stored = f32::from_le_bytes(params[off + 4 * k..off + 4 * k + 4].try_into().expect("4 bytes"));
                let full = f64_at(master + k);
                if full as f32 != stored && !(full.is_nan() && stored.is_nan()) {
                    return Err(Error::format("checkpoint", format!("params.bin and optim.bin disagree for {}", entry.name)));
                }
                vals.push(full);
            }
            model.params.replace(id, Tensor::new(&entry.shape, vals)?);
            master += n;
            sizes.push(n);
        }
        let adam = manifest.optim.adam_t.map(|t| {
            let mut pos = total;
            let mut section = || {
                sizes
                    .iter()
                    .map(|&n| {
                        let v: Vec<f64> = (pos..pos + n).map(f64_at).collect();
                        pos += n;
                        v
                    })
                    .collect::<Vec<_>>()
            };
            let m = section();
            let v = section();
            AdamState { t, m, v }
        });
        let vocab = |tokens: &[String], mem: usize| -> Result<Vocab> {
            if tokens.len() < RESERVED + mem {
                return Err(Error::format("checkpoint", "vocabulary shorter than its reserved ids"));
            }
            Ok(Vocab::new(&tokens[RESERVED..tokens.len() - mem], mem)?)
        };
        let vocab_src = vocab(&manifest.vocab_src, 0)?;
        let vocab_tgt = vocab(&manifest.vocab_tgt, manifest.vocab_tgt_mem)?;
        if vocab_src.tokens() != manifest.vocab_src.as_slice() || vocab_tgt.tokens() != manifest.vocab_tgt.as_slice() {
            return Err(Error::format("checkpoint", "vocabulary does not rebuild identically"));
        }
        Ok(Self {
            model,
            vocab_src,
            vocab_tgt,
            vocab_mode: manifest.vocab_mode,
            step: manifest.step,
            train: manifest.train,
            adam,
            data: manifest.data,
        })
    }
}

/// SHA-256 over the checkpoint's three files.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut parts = Vec::new();
    for name in [MANIFEST, PARAMS, OPTIM] {
        let path = dir.join(name);
        parts.push(fs::read(&path).map_err(Error::io(path))?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(|p| p.as_slice()).collect();
    Ok(sha256_hex(&refs))
}
