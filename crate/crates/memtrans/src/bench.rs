//! Wall-clock timing of encoder forward passes.

use std::collections::BTreeMap;
use std::time::Instant;

use memtrans_core::experiments::{bench_config, bench_input};
use memtrans_core::models::{Model, Pass, Variant};
use memtrans_core::Result;

/// Times one encoder layer per variant; the median of `trials` runs after
/// one untimed warmup.
pub struct WallTimer {
    pub trials: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    models: BTreeMap<(usize, usize), Model>,
}

impl WallTimer {
    pub fn new(trials: usize, d_model: usize, heads: usize, d_ff: usize, max_len: usize) -> Self {
        Self {
            trials: trials.max(1),
            d_model,
            heads,
            d_ff,
            max_len,
            models: BTreeMap::new(),
        }
    }

    /// Median seconds for one forward pass of a length-`n` sequence.
    pub fn time(&mut self, variant: Variant, n: usize, m: usize) -> Result<f64> {
        let key = (Variant::ALL.iter().position(|v| *v == variant).expect("known variant"), m);
        if !self.models.contains_key(&key) {
            let cfg = bench_config(variant, m, self.d_model, self.heads, self.d_ff, self.max_len.max(n + m));
            self.models.insert(key, Model::new(cfg)?);
        }
        let model = &self.models[&key];
        let input = bench_input(n, model.config.vocab_src, 0);
        let run = || -> Result<f64> {
            let start = Instant::now();
            let mut pass = Pass::eval();
            std::hint::black_box(model.encode(&mut pass, &input)?);
            Ok(start.elapsed().as_secs_f64())
        };
        run()?;
        let mut times = (0..self.trials).map(|_| run()).collect::<Result<Vec<f64>>>()?;
        times.sort_by(f64::total_cmp);
        Ok(times[times.len() / 2])
    }
}
