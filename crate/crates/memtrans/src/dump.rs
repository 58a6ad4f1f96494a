//! Attention dumps: `manifest.json` plus one raw little-endian f32
//! row-major matrix per record.

use std::fs;
use std::path::Path;

use memtrans_core::analysis::{AttentionRecord, Stage};
use memtrans_core::models::MemoryLayout;
use memtrans_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "memtrans-attention-dump-v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpTokens {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpLayout {
    pub encoder: MemoryLayout,
    pub decoder: MemoryLayout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub stage: Stage,
    pub layer: usize,
    pub head: usize,
    pub batch: usize,
    pub rows: MemoryLayout,
    pub cols: MemoryLayout,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format: String,
    pub config_hash: String,
    pub tokens: DumpTokens,
    pub layout: DumpLayout,
    pub records: Vec<DumpEntry>,
}

pub fn record_file(rec: &AttentionRecord) -> String {
    format!("{}_l{}_h{}_b{}.f32", rec.stage.name(), rec.layer, rec.head, rec.batch)
}

pub fn write_dump(
    dir: &Path,
    config_hash: &str,
    tokens: DumpTokens,
    layout: DumpLayout,
    records: &[AttentionRecord],
) -> Result<DumpManifest> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        let file = record_file(rec);
        let bytes: Vec<u8> = rec
            .weights
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(Error::io(path))?;
        entries.push(DumpEntry {
            stage: rec.stage,
            layer: rec.layer,
            head: rec.head,
            batch: rec.batch,
            rows: rec.rows,
            cols: rec.cols,
            row_labels: rec.row_labels.clone(),
            col_labels: rec.col_labels.clone(),
            shape: [rec.rows.total(), rec.cols.total()],
            file,
        });
    }
    let manifest = DumpManifest {
        format: FORMAT.into(),
        config_hash: config_hash.into(),
        tokens,
        layout,
        records: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::format("dump manifest", e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, json).map_err(Error::io(path))?;
    Ok(manifest)
}

pub fn read_dump(dir: &Path) -> Result<(DumpManifest, Vec<AttentionRecord>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(Error::io(&path))?;
    let manifest: DumpManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format("dump manifest", e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format("dump manifest", format!("unknown format {:?}", manifest.format)));
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let [r, c] = e.shape;
        if r != e.rows.total() || c != e.cols.total() || e.row_labels.len() != r || e.col_labels.len() != c {
            return Err(Error::format("dump manifest", format!("{}: shape, layout and labels disagree", e.file)));
        }
        // Record files must sit inside the dump directory.
        if e.file.contains(['/', '\\']) || e.file.starts_with('.') {
            return Err(Error::format("dump manifest", format!("bad file name {:?}", e.file)));
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        if bytes.len() != 4 * r * c {
            return Err(Error::format("dump record", format!("{}: {} bytes, expected {}", e.file, bytes.len(), 4 * r * c)));
        }
        let vals = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        records.push(AttentionRecord {
            stage: e.stage,
            layer: e.layer,
            head: e.head,
            batch: e.batch,
            rows: e.rows,
            cols: e.cols,
            row_labels: e.row_labels.clone(),
            col_labels: e.col_labels.clone(),
            weights: Tensor::new(&[r, c], vals)?,
        });
    }
    Ok((manifest, records))
}
