//! Corpus-level BLEU-4.
//!
//! Clipped n-gram counts (n = 1..4) are pooled over the corpus, a zero
//! precision is replaced by [`ZERO_PRECISION`], and the geometric mean is
//! scaled by the brevity penalty and reported on a 0–100 scale.

use alloc::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Stand-in for a zero n-gram precision so the geometric mean stays defined.
pub const ZERO_PRECISION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    /// 0–100.
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Ord>(seq: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// `(clipped matches, hypothesis n-grams)` for one sentence pair.
pub fn modified_precision<T: Ord>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let clipped = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, h.values().sum())
}

/// Corpus BLEU-4 over parallel hypothesis/reference lists.
///
/// # Panics
/// If the two lists differ in length.
pub fn corpus_bleu<T: Ord>(hyps: &[impl AsRef<[T]>], refs: &[impl AsRef<[T]>]) -> Bleu {
    assert_eq!(hyps.len(), refs.len(), "hypothesis and reference counts differ");
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t) = modified_precision(h, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        let p = if total[n] == 0 { 0.0 } else { matched[n] as f64 / total[n] as f64 };
        precisions[n] = p;
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    let log_mean = precisions
        .iter()
        .map(|&p| libm::log(if p > 0.0 { p } else { ZERO_PRECISION }))
        .sum::<f64>()
        / 4.0;
    Bleu {
        score: 100.0 * brevity_penalty * libm::exp(log_mean),
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}
