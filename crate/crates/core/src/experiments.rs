//! Lesion grid, memory extension and the attention complexity bench.
//!
//! Every experiment returns an [`ExperimentReport`]: rows sorted by setting,
//! each a pure function of the model, data and seed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSource, Pair, TokenGrid, RESERVED};
use crate::error::{Error, Result};
use crate::models::{lesion_memory, Model, ModelConfig, Variant};
use crate::numerics::Rng;
use crate::training::{evaluate, mean_loss, Flow, StepMetrics, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Lesion,
    Extension,
    Complexity,
}

/// Where a report's inputs came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub environment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    /// Sort key; rows are ordered by it.
    pub key: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Why the row has no metrics, when it has none.
    pub not_applicable: Option<String>,
}

impl ReportRow {
    pub fn new(setting: impl Into<String>, key: u64) -> Self {
        Self {
            setting: setting.into(),
            key,
            metrics: BTreeMap::new(),
            not_applicable: None,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Published values kept alongside the desk-scale rows for layout
/// comparison only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub columns: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub provenance: Provenance,
    pub rows: Vec<ReportRow>,
    /// Derived scalars such as fitted slopes.
    pub summary: BTreeMap<String, f64>,
    pub reference: Vec<ReferenceRow>,
}

impl ExperimentReport {
    pub fn new(kind: ExperimentKind, provenance: Provenance) -> Self {
        Self {
            kind,
            provenance,
            rows: Vec::new(),
            summary: BTreeMap::new(),
            reference: Vec::new(),
        }
    }

    pub fn sort_rows(&mut self) {
        self.rows.sort_by(|a, b| a.key.cmp(&b.key).then_with(|| a.setting.cmp(&b.setting)));
    }

    pub fn row(&self, setting: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    /// Aligned plain-text table. Lesion and extension reports put settings
    /// in columns (one line per metric); the complexity report puts them in
    /// rows.
    pub fn render_table(&self) -> String {
        let metric_names: Vec<String> = {
            let mut names: Vec<String> = Vec::new();
            for r in &self.rows {
                for k in r.metrics.keys() {
                    if !names.contains(k) {
                        names.push(k.clone());
                    }
                }
            }
            names
        };
        let cell = |r: &ReportRow, m: &str| -> String {
            match (&r.not_applicable, r.metric(m)) {
                (Some(_), _) => "n/a".to_string(),
                (None, Some(v)) => format_value(v),
                (None, None) => "-".to_string(),
            }
        };
        let mut grid: Vec<Vec<String>> = Vec::new();
        match self.kind {
            ExperimentKind::Complexity => {
                let mut head = Vec::from(["setting".to_string()]);
                head.extend(metric_names.iter().cloned());
                grid.push(head);
                for r in &self.rows {
                    let mut line = Vec::from([r.setting.clone()]);
                    line.extend(metric_names.iter().map(|m| cell(r, m)));
                    grid.push(line);
                }
            }
            _ => {
                let mut head = Vec::from(["metric".to_string()]);
                head.extend(self.rows.iter().map(|r| r.setting.clone()));
                grid.push(head);
                for m in &metric_names {
                    let mut line = Vec::from([m.clone()]);
                    line.extend(self.rows.iter().map(|r| cell(r, m)));
                    grid.push(line);
                }
            }
        }
        let mut out = align(&grid);
        if !self.summary.is_empty() {
            out.push('\n');
            for (k, v) in &self.summary {
                let _ = writeln!(out, "{k}: {}", format_value(*v));
            }
        }
        for r in &self.reference {
            out.push('\n');
            let mut g = Vec::from([{
                let mut h = Vec::from([String::from("reference")]);
                h.extend(r.columns.iter().cloned());
                h
            }]);
            let mut line = Vec::from([r.label.clone()]);
            line.extend(r.values.iter().map(|v| format!("{v:.2}")));
            g.push(line);
            out.push_str(&align(&g));
        }
        out
    }
}

fn format_value(v: f64) -> String {
    if v != 0.0 && (libm::fabs(v) >= 1e6 || libm::fabs(v) < 1e-3) {
        format!("{v:.4e}")
    } else {
        format!("{v:.4}")
    }
}

fn align(grid: &[Vec<String>]) -> String {
    let cols = grid.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in grid {
        let mut line = String::new();
        for (c, s) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{s:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "  {s:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Memory sizes of the published lesion grid.
pub const LESION_SIZES: [usize; 6] = [0, 2, 5, 10, 20, 30];

fn lesion_reference() -> Vec<ReferenceRow> {
    let columns: Vec<String> = LESION_SIZES.iter().map(|m| format!("m={m}")).collect();
    Vec::from([
        ReferenceRow {
            label: "MemTransformer 10, WMT-14 DE-EN BLEU".into(),
            columns: columns.clone(),
            values: Vec::from([11.75, 15.91, 18.22, 25.07, 12.39, 7.87]),
        },
        ReferenceRow {
            label: "MemTransformer 20, WMT-14 DE-EN BLEU".into(),
            columns,
            values: Vec::from([3.87, 8.58, 9.75, 14.51, 25.58, 7.51]),
        },
    ])
}

fn extension_reference() -> Vec<ReferenceRow> {
    Vec::from([ReferenceRow {
        label: "MemTransformer 5 (small), WMT-14 DE-EN BLEU".into(),
        columns: ["mem 5", "mem 10", "mem 15", "mem 20"].iter().map(|s| s.to_string()).collect(),
        values: Vec::from([19.17, 19.18, 19.19, 19.41]),
    }])
}

fn eval_row(model: &Model, setting: String, key: u64, pairs: &[Pair], batch_size: usize) -> Result<ReportRow> {
    let e = evaluate(model, pairs, batch_size)?;
    let mut row = ReportRow::new(setting, key);
    row.metrics.insert("token_accuracy".into(), e.token_accuracy);
    row.metrics.insert("sequence_accuracy".into(), e.sequence_accuracy);
    row.metrics.insert("bleu4".into(), e.bleu4);
    row.metrics.insert("loss".into(), mean_loss(model, pairs, batch_size)?);
    Ok(row)
}

/// Evaluates `model` with its encoder memory resized to each of `sizes`.
/// New memory rows are drawn from `init_seed`. A bottleneck model has no
/// meaning without memory, so its `m' = 0` row is marked not applicable.
pub fn lesion_grid(
    model: &Model,
    sizes: &[usize],
    eval_pairs: &[Pair],
    batch_size: usize,
    init_seed: u64,
    provenance: Provenance,
) -> Result<ExperimentReport> {
    if !model.config.variant.uses_memory() {
        return Err(Error::config(format!(
            "lesion needs a memory variant, got {}",
            model.config.variant.name()
        )));
    }
    if eval_pairs.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut report = ExperimentReport::new(ExperimentKind::Lesion, provenance);
    for m in sizes {
        let setting = format!("m={m}");
        if m == 0 && model.config.variant.is_bottleneck() {
            let mut row = ReportRow::new(setting, m as u64);
            row.not_applicable = Some("bottleneck variants need at least one memory token".into());
            report.rows.push(row);
            continue;
        }
        let lesioned = lesion_memory(model, m, init_seed)?;
        report.rows.push(eval_row(&lesioned, setting, m as u64, eval_pairs, batch_size)?);
    }
    report.sort_rows();
    report.summary.insert("trained_m".into(), model.memory_size() as f64);
    report.reference = lesion_reference();
    Ok(report)
}

/// Result of [`extend_memory`].
#[derive(Debug, Clone)]
pub struct Extension {
    pub model: Model,
    pub report: ExperimentReport,
    pub log: Vec<StepMetrics>,
}

/// Appends `add` memory rows (drawn exactly as [`lesion_grid`] draws them for
/// the same `init_seed`), then fine-tunes every parameter for
/// `train.steps` steps on `source`. Rows: before extension, right after it,
/// and after fine-tuning; `loss` is the teacher-forced loss on `eval_pairs`.
pub fn extend_memory(
    model: &Model,
    add: usize,
    train: &TrainConfig,
    source: &dyn BatchSource,
    eval_pairs: &[Pair],
    batch_size: usize,
    init_seed: u64,
    provenance: Provenance,
) -> Result<Extension> {
    if add == 0 {
        return Err(Error::config("memory extension needs add >= 1"));
    }
    if !model.config.variant.uses_memory() {
        return Err(Error::config(format!(
            "memory extension needs a memory variant, got {}",
            model.config.variant.name()
        )));
    }
    let m = model.memory_size();
    let mut report = ExperimentReport::new(ExperimentKind::Extension, provenance);
    report.rows.push(eval_row(model, format!("m={m}"), 0, eval_pairs, batch_size)?);
    let extended = lesion_memory(model, m + add, init_seed)?;
    report
        .rows
        .push(eval_row(&extended, format!("m={} +0 steps", m + add), 1, eval_pairs, batch_size)?);
    let mut trainer = Trainer::new(extended, train.clone())?;
    let log = trainer.run(source, |_, _| Ok(Flow::Continue))?;
    let tuned = trainer.model;
    report.rows.push(eval_row(
        &tuned,
        format!("m={} +{} steps", m + add, log.len()),
        2,
        eval_pairs,
        batch_size,
    )?);
    report.summary.insert("added".into(), add as f64);
    report.summary.insert("finetune_steps".into(), log.len() as f64);
    report.reference = extension_reference();
    Ok(Extension {
        model: tuned,
        report,
        log,
    })
}

/// Attention-score multiply-adds of one encoder layer (`QK^T` products).
pub fn attention_score_count(variant: Variant, n: usize, m: usize, d_model: usize) -> u128 {
    let (n, m, d) = (n as u128, m as u128, d_model as u128);
    match variant {
        Variant::Baseline | Variant::Mem | Variant::MemCtrl | Variant::MemCtrlShared => (n + m) * (n + m) * d,
        Variant::MemBottleneck => m * (m + n) * d + n * m * d,
        Variant::MemBottleneckSkip => m * (m + n) * d,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::config("a slope needs at least two points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::contract("log-log fit needs positive values"));
    }
    let k = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| libm::log(p.0)).collect();
    let ly: Vec<f64> = points.iter().map(|p| libm::log(p.1)).collect();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::config("lengths must not all be equal"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Memory size a variant is measured at: the baseline has none.
pub fn bench_memory(variant: Variant, m: usize) -> usize {
    if variant.uses_memory() {
        m
    } else {
        0
    }
}

/// Single-layer encoder used for timing.
pub fn bench_config(variant: Variant, m: usize, d_model: usize, heads: usize, d_ff: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        variant,
        n_layers_enc: 1,
        n_layers_dec: 1,
        d_model,
        d_ff,
        heads,
        p_drop: 0.0,
        m_enc: bench_memory(variant, m),
        m_dec: 0,
        vocab_src: 32,
        vocab_tgt: 32,
        max_len,
        pe_on_memory: false,
        bottleneck_kv: Default::default(),
        seed: 0,
    }
}

/// One random source sequence of length `n` for timing.
pub fn bench_input(n: usize, vocab: usize, seed: u64) -> TokenGrid {
    let mut rng = Rng::derive(seed, 0xbe4c, n as u64);
    let span = (vocab - RESERVED) as u64;
    let seq: Vec<usize> = (0..n).map(|_| RESERVED + rng.below(span) as usize).collect();
    TokenGrid::from_sequences(&[seq])
}

/// Analytic counts (and, when `timer` is given, wall times) for every
/// variant and length, with per-variant log-log slopes in `summary`.
/// `timer(variant, n, m)` returns seconds for one forward pass.
pub fn complexity_bench(
    variants: &[Variant],
    lengths: &[usize],
    m: usize,
    d_model: usize,
    mut timer: Option<&mut dyn FnMut(Variant, usize, usize) -> Result<f64>>,
    provenance: Provenance,
) -> Result<ExperimentReport> {
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    lengths.dedup();
    if lengths.len() < 2 {
        return Err(Error::config("complexity bench needs at least two distinct lengths"));
    }
    if lengths[0] == 0 {
        return Err(Error::config("lengths must be positive"));
    }
    let mut report = ExperimentReport::new(ExperimentKind::Complexity, provenance);
    for (vi, &v) in variants.iter().enumerate() {
        let mv = bench_memory(v, m);
        if v.is_bottleneck() && mv == 0 {
            return Err(Error::config(format!("{} needs m >= 1", v.name())));
        }
        let mut counts = Vec::new();
        let mut times = Vec::new();
        for &n in &lengths {
            let mut row = ReportRow::new(format!("{} n={n} m={mv}", v.name()), (vi as u64) << 32 | n as u64);
            let c = attention_score_count(v, n, mv, d_model) as f64;
            row.metrics.insert("score_madds".into(), c);
            counts.push((n as f64, c));
            if let Some(t) = timer.as_deref_mut() {
                let s = t(v, n, mv)?;
                row.metrics.insert("wall_seconds".into(), s);
                times.push((n as f64, s));
            }
            report.rows.push(row);
        }
        report
            .summary
            .insert(format!("{}.analytic_slope", v.name()), loglog_slope(&counts)?);
        if !times.is_empty() {
            report
                .summary
                .insert(format!("{}.wall_slope", v.name()), loglog_slope(&times)?);
        }
    }
    report.sort_rows();
    Ok(report)
}
