//! Flat `key=value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key except
//! `out_dir` has a default; unknown keys are errors. Exactly one of `task`
//! and `corpus_path` selects the data (the default is `task=copy`).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use memtrans_core::data::{TaskKind, VocabMode};
use memtrans_core::models::{BottleneckKv, ModelConfig, Variant};
use memtrans_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const KEYS: [&str; 22] = [
    "variant",
    "n_layers_enc",
    "n_layers_dec",
    "d_model",
    "d_ff",
    "heads",
    "p_drop",
    "m_enc",
    "m_dec",
    "pe_on_memory",
    "bottleneck_kv",
    "task",
    "corpus_path",
    "vocab_mode",
    "len_min",
    "len_max",
    "vocab_size",
    "batch_size",
    "steps",
    "warmup_steps",
    "seed",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RunConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}: {msg}")]
    Value {
        line: usize,
        key: String,
        value: String,
        msg: String,
    },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Task(TaskKind),
    Corpus(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub p_drop: f64,
    pub m_enc: usize,
    pub m_dec: usize,
    pub pe_on_memory: bool,
    pub bottleneck_kv: BottleneckKv,
    pub data: DataSource,
    pub vocab_mode: VocabMode,
    pub len_min: usize,
    pub len_max: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Defaults for everything but `out_dir`: the small translation model
    /// on the copy task.
    pub fn with_out_dir(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            variant: Variant::Baseline,
            n_layers_enc: 4,
            n_layers_dec: 4,
            d_model: 128,
            d_ff: 512,
            heads: 8,
            p_drop: 0.1,
            m_enc: 0,
            m_dec: 0,
            pe_on_memory: false,
            bottleneck_kv: BottleneckKv::Post,
            data: DataSource::Task(TaskKind::Copy),
            vocab_mode: VocabMode::Word,
            len_min: 2,
            len_max: 16,
            vocab_size: 20,
            batch_size: 64,
            steps: 10_000,
            warmup_steps: 4000,
            seed: 0,
            out_dir: out_dir.into(),
        }
    }

    /// Parses a config file's text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, RunConfigError> {
        let mut cfg = Self::with_out_dir(PathBuf::new());
        let mut seen = BTreeSet::new();
        let mut have_out_dir = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(RunConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(RunConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            let slot = if key == "corpus_path" { "task" } else { key };
            if !seen.insert(slot) {
                return Err(RunConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            let bad = |msg: String| RunConfigError::Value {
                line,
                key: key.to_string(),
                value: value.to_string(),
                msg,
            };
            fn num<T: FromStr>(v: &str) -> Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| e.to_string())
            }
            match key {
                "variant" => cfg.variant = parse_variant(value).map_err(bad)?,
                "n_layers_enc" => cfg.n_layers_enc = num(value).map_err(bad)?,
                "n_layers_dec" => cfg.n_layers_dec = num(value).map_err(bad)?,
                "d_model" => cfg.d_model = num(value).map_err(bad)?,
                "d_ff" => cfg.d_ff = num(value).map_err(bad)?,
                "heads" => cfg.heads = num(value).map_err(bad)?,
                "p_drop" => cfg.p_drop = num(value).map_err(bad)?,
                "m_enc" => cfg.m_enc = num(value).map_err(bad)?,
                "m_dec" => cfg.m_dec = num(value).map_err(bad)?,
                "pe_on_memory" => cfg.pe_on_memory = num(value).map_err(bad)?,
                "bottleneck_kv" => cfg.bottleneck_kv = value.parse().map_err(|e: memtrans_core::Error| bad(e.to_string()))?,
                "task" => cfg.data = DataSource::Task(value.parse().map_err(|e: memtrans_core::Error| bad(e.to_string()))?),
                "corpus_path" => cfg.data = DataSource::Corpus(base.join(value)),
                "vocab_mode" => cfg.vocab_mode = value.parse().map_err(|e: memtrans_core::Error| bad(e.to_string()))?,
                "len_min" => cfg.len_min = num(value).map_err(bad)?,
                "len_max" => cfg.len_max = num(value).map_err(bad)?,
                "vocab_size" => cfg.vocab_size = num(value).map_err(bad)?,
                "batch_size" => cfg.batch_size = num(value).map_err(bad)?,
                "steps" => cfg.steps = num(value).map_err(bad)?,
                "warmup_steps" => cfg.warmup_steps = num(value).map_err(bad)?,
                "seed" => cfg.seed = num(value).map_err(bad)?,
                "out_dir" => {
                    if value.is_empty() {
                        return Err(bad("empty path".into()));
                    }
                    cfg.out_dir = base.join(value);
                    have_out_dir = true;
                }
                _ => unreachable!("key list checked above"),
            }
        }
        if !have_out_dir {
            return Err(RunConfigError::Missing("out_dir"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> crate::error::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::Error::io(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self::parse(&text, base)?)
    }

    pub fn validate(&self) -> Result<(), RunConfigError> {
        let invalid = |m: &str| Err(RunConfigError::Invalid(m.to_string()));
        if self.len_min == 0 || self.len_min > self.len_max {
            return invalid("need 1 <= len_min <= len_max");
        }
        if self.steps == 0 {
            return invalid("steps must be >= 1");
        }
        if !self.variant.uses_memory() && (self.m_enc > 0 || self.m_dec > 0) {
            return invalid("baseline takes no memory (m_enc and m_dec must be 0)");
        }
        if self.variant.is_bottleneck() && self.m_enc == 0 {
            return invalid("bottleneck variants need m_enc >= 1");
        }
        self.train_config()
            .validate()
            .map_err(|e| RunConfigError::Invalid(e.to_string()))?;
        // Model validation needs vocabulary sizes; the task ones stand in.
        self.model_config(self.vocab_size.max(5), self.vocab_size.max(5) + self.m_dec)
            .validate()
            .map_err(|e| RunConfigError::Invalid(e.to_string()))
    }

    pub fn model_config(&self, vocab_src: usize, vocab_tgt: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            n_layers_enc: self.n_layers_enc,
            n_layers_dec: self.n_layers_dec,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            p_drop: self.p_drop,
            m_enc: self.m_enc,
            m_dec: self.m_dec,
            vocab_src,
            vocab_tgt,
            max_len: (self.len_max + 2).max(512),
            pe_on_memory: self.pe_on_memory,
            bottleneck_kv: self.bottleneck_kv,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            warmup_steps: self.warmup_steps,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Canonical text form; parsing it back gives the same config when
    /// paths are absolute.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("variant", self.variant.name().to_string());
        kv("n_layers_enc", self.n_layers_enc.to_string());
        kv("n_layers_dec", self.n_layers_dec.to_string());
        kv("d_model", self.d_model.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("heads", self.heads.to_string());
        kv("p_drop", self.p_drop.to_string());
        kv("m_enc", self.m_enc.to_string());
        kv("m_dec", self.m_dec.to_string());
        kv("pe_on_memory", self.pe_on_memory.to_string());
        kv(
            "bottleneck_kv",
            match self.bottleneck_kv {
                BottleneckKv::Pre => "pre",
                BottleneckKv::Post => "post",
            }
            .to_string(),
        );
        match &self.data {
            DataSource::Task(k) => kv("task", task_name(*k).to_string()),
            DataSource::Corpus(p) => kv("corpus_path", p.display().to_string()),
        }
        kv(
            "vocab_mode",
            match self.vocab_mode {
                VocabMode::Word => "word",
                VocabMode::Char => "char",
            }
            .to_string(),
        );
        kv("len_min", self.len_min.to_string());
        kv("len_max", self.len_max.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: memtrans_core::Error| e.to_string())
}

pub fn task_name(k: TaskKind) -> &'static str {
    match k {
        TaskKind::Copy => "copy",
        TaskKind::Reverse => "reverse",
        TaskKind::Sort => "sort",
    }
}
