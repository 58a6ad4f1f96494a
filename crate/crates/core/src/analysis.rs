//! Attention-map forensics.
//!
//! A memory-augmented attention map splits into four quadrants (rows are
//! queries, columns are keys):
//!
//! ```text
//!                 keys: memory     keys: sequence
//! queries: mem    process          write
//! queries: seq    read             update
//! ```
//!
//! Each quadrant is scored for mass, diagonal structure, sharpness and
//! column concentration, and [`classify`] turns those scores into pattern
//! labels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::models::MemoryLayout;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    EncSelf,
    EncMemStream,
    EncSeqStream,
    DecSelf,
    DecCross,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::EncSelf => "enc_self",
            Stage::EncMemStream => "enc_mem_stream",
            Stage::EncSeqStream => "enc_seq_stream",
            Stage::DecSelf => "dec_self",
            Stage::DecCross => "dec_cross",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        [
            Stage::EncSelf,
            Stage::EncMemStream,
            Stage::EncSeqStream,
            Stage::DecSelf,
            Stage::DecCross,
        ]
        .into_iter()
        .find(|st| st.name() == s)
    }
}

/// One captured attention map for a single head and batch element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub stage: Stage,
    pub layer: usize,
    pub head: usize,
    pub batch: usize,
    /// Memory/sequence split of the query rows.
    pub rows: MemoryLayout,
    /// Memory/sequence split of the key columns.
    pub cols: MemoryLayout,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-stochastic `[rows.total(), cols.total()]` matrix.
    pub weights: Tensor,
}

impl AttentionRecord {
    /// A record with generic labels, mainly for constructed maps.
    pub fn synthetic(stage: Stage, rows: MemoryLayout, cols: MemoryLayout, weights: Tensor) -> Self {
        let label = |l: MemoryLayout| -> Vec<String> {
            (0..l.m)
                .map(|k| format!("[mem]{k}"))
                .chain((0..l.n).map(|t| format!("t{t}")))
                .collect()
        };
        Self {
            stage,
            layer: 0,
            head: 0,
            batch: 0,
            rows,
            cols,
            row_labels: label(rows),
            col_labels: label(cols),
            weights,
        }
    }

    /// Checks shapes, labels and row sums (within `tol`).
    pub fn is_consistent(&self, tol: f64) -> bool {
        let (r, c) = (self.rows.total(), self.cols.total());
        if self.weights.shape() != [r, c] || self.row_labels.len() != r || self.col_labels.len() != c {
            return false;
        }
        (0..r).all(|i| (self.weights.row(i).iter().sum::<f64>() - 1.0).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    /// Sequence queries × sequence keys.
    Update,
    /// Memory queries × sequence keys.
    Write,
    /// Sequence queries × memory keys.
    Read,
    /// Memory queries × memory keys.
    Process,
}

/// The four sub-matrices of a record; any may have zero rows or columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrants {
    pub update: Tensor,
    pub write: Tensor,
    pub read: Tensor,
    pub process: Tensor,
}

fn sub_matrix(w: &Tensor, rows: core::ops::Range<usize>, cols: core::ops::Range<usize>) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for i in rows.clone() {
        data.extend_from_slice(&w.row(i)[cols.clone()]);
    }
    Tensor::new(&[rows.len(), cols.len()], data).expect("sub-matrix shape")
}

pub fn quadrant_split(rec: &AttentionRecord) -> Quadrants {
    let (rm, rs) = (rec.rows.mem_range(), rec.rows.seq_range());
    let (cm, cs) = (rec.cols.mem_range(), rec.cols.seq_range());
    Quadrants {
        update: sub_matrix(&rec.weights, rs.clone(), cs.clone()),
        write: sub_matrix(&rec.weights, rm.clone(), cs),
        read: sub_matrix(&rec.weights, rs, cm.clone()),
        process: sub_matrix(&rec.weights, rm, cm),
    }
}

fn dims(w: &Tensor) -> (usize, usize) {
    match w.shape() {
        [r, c] => (*r, *c),
        _ => w.rows_cols(),
    }
}

/// Fraction of mass within `band` of the (index-scaled) diagonal
/// `j ≈ i · cols / rows`, or of the anti-diagonal when `reversed`.
pub fn diagonality(w: &Tensor, band: usize, reversed: bool) -> f64 {
    offset_band_mass(w, band, reversed, 0.0)
}

fn offset_band_mass(w: &Tensor, band: usize, reversed: bool, offset: f64) -> f64 {
    let (r, c) = dims(w);
    let total = w.sum();
    if r == 0 || c == 0 || total <= 0.0 {
        return 0.0;
    }
    let scale = c as f64 / r as f64;
    let mut inside = 0.0;
    for i in 0..r {
        let src = if reversed { r - 1 - i } else { i };
        let centre = src as f64 * scale + offset;
        for (j, &v) in w.row(i).iter().enumerate() {
            if (j as f64 - centre).abs() <= band as f64 + 1e-9 {
                inside += v;
            }
        }
    }
    inside / total
}

/// Best band mass along a diagonal shifted by more than `band` positions.
pub fn shifted_diagonality(w: &Tensor, band: usize) -> (f64, isize) {
    let (r, c) = dims(w);
    let mut best = (0.0, 0);
    if r == 0 || c == 0 {
        return best;
    }
    let reach = c.max(r) as isize;
    for off in -reach..=reach {
        if off.unsigned_abs() <= band {
            continue;
        }
        let v = offset_band_mass(w, band, false, off as f64);
        if v > best.0 {
            best = (v, off);
        }
    }
    best
}

/// Largest single-column share of the total mass.
pub fn column_concentration(w: &Tensor) -> f64 {
    column_block_concentration(w, 1)
}

/// Largest share of mass held by any run of `width` adjacent columns.
pub fn column_block_concentration(w: &Tensor, width: usize) -> f64 {
    let (r, c) = dims(w);
    let total = w.sum();
    if r == 0 || c == 0 || total <= 0.0 || width == 0 {
        return 0.0;
    }
    let cols: Vec<f64> = (0..c).map(|j| (0..r).map(|i| w.row(i)[j]).sum()).collect();
    let width = width.min(c);
    cols.windows(width)
        .map(|win| win.iter().sum::<f64>())
        .fold(0.0, f64::max)
        / total
}

/// Contiguous runs of columns whose mass exceeds the mean column mass.
pub fn column_segments(w: &Tensor) -> Vec<(usize, usize)> {
    let (r, c) = dims(w);
    if r == 0 || c == 0 {
        return Vec::new();
    }
    let cols: Vec<f64> = (0..c).map(|j| (0..r).map(|i| w.row(i)[j]).sum()).collect();
    let mean = cols.iter().sum::<f64>() / c as f64;
    let mut segs = Vec::new();
    let mut start = None;
    for (j, &v) in cols.iter().enumerate() {
        match (v > mean + 1e-12, start) {
            (true, None) => start = Some(j),
            (false, Some(s)) => {
                segs.push((s, j));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segs.push((s, c));
    }
    segs
}

/// `1 - mean_row(entropy(row) / ln(cols))` over rows renormalized to sum
/// to one; rows without mass are skipped. One-hot rows score 1, uniform 0.
pub fn sharpness(w: &Tensor) -> f64 {
    let (r, c) = dims(w);
    if r == 0 || c == 0 {
        return 0.0;
    }
    if c == 1 {
        return 1.0;
    }
    let ln_c = libm::log(c as f64);
    let mut acc = 0.0;
    let mut counted = 0;
    for i in 0..r {
        let row = w.row(i);
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            continue;
        }
        let h: f64 = row
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / s;
                -p * libm::log(p)
            })
            .sum();
        acc += h / ln_c;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        1.0 - acc / counted as f64
    }
}

/// Direction of the per-row argmax columns: `Some(true)` strictly increasing,
/// `Some(false)` strictly decreasing.
fn argmax_order(w: &Tensor) -> Option<bool> {
    let (r, c) = dims(w);
    if r < 2 || c < 2 {
        return None;
    }
    let am: Vec<usize> = (0..r)
        .map(|i| {
            let row = w.row(i);
            (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b })
        })
        .collect();
    if am.windows(2).all(|p| p[0] < p[1]) {
        Some(true)
    } else if am.windows(2).all(|p| p[0] > p[1]) {
        Some(false)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantStats {
    /// Share of the whole record's mass.
    pub mass: f64,
    pub diagonality: f64,
    pub reverse_diagonality: f64,
    pub shifted_diagonality: f64,
    pub shift: isize,
    pub sharpness: f64,
    pub column_concentration: f64,
    pub column_segments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantScores {
    pub update: QuadrantStats,
    pub write: QuadrantStats,
    pub read: QuadrantStats,
    pub process: QuadrantStats,
    /// Sharpness of the whole map.
    pub sharpness: f64,
}

impl QuadrantScores {
    pub fn mass_sum(&self) -> f64 {
        self.update.mass + self.write.mass + self.read.mass + self.process.mass
    }
}

fn stats(q: &Tensor, total: f64, band: usize) -> QuadrantStats {
    let (shifted, shift) = shifted_diagonality(q, band);
    QuadrantStats {
        mass: if total > 0.0 { q.sum() / total } else { 0.0 },
        diagonality: diagonality(q, band, false),
        reverse_diagonality: diagonality(q, band, true),
        shifted_diagonality: shifted,
        shift,
        sharpness: sharpness(q),
        column_concentration: column_concentration(q),
        column_segments: column_segments(q).len(),
    }
}

pub fn quadrant_scores(rec: &AttentionRecord, band: usize) -> QuadrantScores {
    let q = quadrant_split(rec);
    let total = rec.weights.sum();
    QuadrantScores {
        update: stats(&q.update, total, band),
        write: stats(&q.write, total, band),
        read: stats(&q.read, total, band),
        process: stats(&q.process, total, band),
        sharpness: sharpness(&rec.weights),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mass: f64,
    pub diag: f64,
    pub sharp: f64,
    pub band: usize,
    /// Below this whole-map sharpness an otherwise unlabeled map is
    /// heterogeneous.
    pub heterogeneous_sharpness: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            mass: 0.35,
            diag: 0.6,
            sharp: 0.7,
            band: 1,
            heterogeneous_sharpness: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Write,
    Read,
    CopyForward,
    CopyReverse,
    Store,
    Fusion,
    Heterogeneous,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Write => "write",
            Label::Read => "read",
            Label::CopyForward => "copy_forward",
            Label::CopyReverse => "copy_reverse",
            Label::Store => "store",
            Label::Fusion => "fusion",
            Label::Heterogeneous => "heterogeneous",
        }
    }
}

/// Pattern labels for one record.
///
/// - `write` / `read`: that quadrant holds more than `mass` of the map.
/// - memory-to-memory (process) quadrant, when non-empty:
///   diagonal above `diag` is `store` if sharp, `fusion` otherwise;
///   else an anti-diagonal above `diag` is `copy_reverse`;
///   else a shifted diagonal above `diag` is `copy_forward`;
///   else sharp rows whose argmax columns move monotonically are a block copy
///   in that direction.
/// - nothing matched and the map is diffuse: `heterogeneous`.
pub fn classify(rec: &AttentionRecord, th: &Thresholds) -> Vec<Label> {
    let s = quadrant_scores(rec, th.band);
    let mut labels = Vec::new();
    if s.write.mass > th.mass {
        labels.push(Label::Write);
    }
    if s.read.mass > th.mass {
        labels.push(Label::Read);
    }
    let q = quadrant_split(rec);
    let p = &s.process;
    if q.process.numel() > 0 && p.mass > 0.0 {
        if p.diagonality > th.diag {
            labels.push(if p.sharpness > th.sharp { Label::Store } else { Label::Fusion });
        } else if p.reverse_diagonality > th.diag {
            labels.push(Label::CopyReverse);
        } else if p.shifted_diagonality > th.diag {
            labels.push(Label::CopyForward);
        } else if p.sharpness > th.sharp {
            match argmax_order(&q.process) {
                Some(true) => labels.push(Label::CopyForward),
                Some(false) => labels.push(Label::CopyReverse),
                None => {}
            }
        }
    }
    if labels.is_empty() && s.sharpness < th.heterogeneous_sharpness {
        labels.push(Label::Heterogeneous);
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stage: Stage,
    pub layer: usize,
    pub head: usize,
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<Label>,
    pub scores: QuadrantScores,
    pub heatmap: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub thresholds: Thresholds,
    pub records: Vec<ReportRow>,
    pub label_counts: BTreeMap<String, usize>,
    pub unclassified: usize,
}

/// Classification table for a set of records. Heatmap file names are
/// filled in; the images themselves come from [`heatmap_pgm`].
pub fn report(records: &[AttentionRecord], th: &Thresholds) -> AnalysisReport {
    let mut rows = Vec::with_capacity(records.len());
    let mut label_counts = BTreeMap::new();
    let mut unclassified = 0;
    for rec in records {
        let labels = classify(rec, th);
        if labels.is_empty() {
            unclassified += 1;
        }
        for l in &labels {
            *label_counts.entry(String::from(l.name())).or_insert(0) += 1;
        }
        rows.push(ReportRow {
            stage: rec.stage,
            layer: rec.layer,
            head: rec.head,
            batch: rec.batch,
            rows: rec.rows.total(),
            cols: rec.cols.total(),
            labels,
            scores: quadrant_scores(rec, th.band),
            heatmap: heatmap_filename(rec),
        });
    }
    AnalysisReport {
        thresholds: *th,
        records: rows,
        label_counts,
        unclassified,
    }
}

pub fn heatmap_filename(rec: &AttentionRecord) -> String {
    format!(
        "{}_l{}_h{}_b{}.pgm",
        rec.stage.name(),
        rec.layer,
        rec.head,
        rec.batch
    )
}

/// Binary PGM (P5) image of a matrix, brightness scaled to its maximum.
pub fn heatmap_pgm(w: &Tensor) -> Vec<u8> {
    let (r, c) = dims(w);
    let max = w.data().iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{c} {r}\n255\n").into_bytes();
    out.extend(w.data().iter().map(|&v| {
        if max > 0.0 {
            libm::round((v.max(0.0) / max) * 255.0) as u8
        } else {
            0
        }
    }));
    out
}
