//! Learning-rate schedule, Adam, the training loop and evaluation.

mod bleu;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use bleu::{corpus_bleu, modified_precision, Bleu, ZERO_PRECISION};

use crate::data::{Batch, BatchSource, Pair, PAD};
use crate::error::{Error, Result};
use crate::models::{Model, Pass};
use crate::numerics::{ParamStore, Rng};

/// Noam schedule: `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("noam_lr is defined for step >= 1"));
    }
    if warmup_steps == 0 {
        return Err(Error::config("warmup_steps must be >= 1"));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(libm::pow(d_model as f64, -0.5) * f64::min(libm::pow(s, -0.5), s * libm::pow(w, -1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one bias-corrected Adam update from the store's gradients.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract("optimizer state does not match the parameter set"));
        }
        for (i, (_, p)) in store.iter().enumerate() {
            if self.m[i].len() != p.value.numel() {
                return Err(Error::dim("adam state", &[self.m[i].len()], p.value.shape()));
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(alloc::format!("gradient of {}", p.name)));
            }
        }
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data().to_vec();
            for (k, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * mh / (libm::sqrt(vh) + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        store
            .iter()
            .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum(),
    );
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm limit; off by default.
    pub clip_norm: Option<f64>,
    pub eval_every: u64,
    pub seed: u64,
    /// Multiplies the Noam rate.
    pub lr_scale: f64,
    /// Replaces the schedule with a constant rate.
    pub lr_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            warmup_steps: 4000,
            adam: AdamConfig::default(),
            clip_norm: None,
            eval_every: 500,
            seed: 0,
            lr_scale: 1.0,
            lr_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr_scale.is_finite() && self.lr_scale >= 0.0) {
            return Err(Error::config("lr_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub token_acc: f64,
}

/// What a training hook wants next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Model plus optimizer state. Batch `k` and the dropout stream of step `k`
/// depend only on `(seed, k)`, so a trainer rebuilt from a checkpoint at step
/// `k` continues exactly as the uninterrupted run would.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
}

const DROPOUT_STREAM: u64 = 0xd20b;

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            adam,
            config,
            step: 0,
        })
    }

    /// Restores a trainer from saved state.
    pub fn resume(model: Model, adam: AdamState, config: TrainConfig, step: u64) -> Result<Self> {
        config.validate()?;
        if adam.m.len() != model.params.len() {
            return Err(Error::contract("optimizer state does not match the model"));
        }
        Ok(Self {
            model,
            adam,
            config,
            step,
        })
    }

    /// Learning rate for 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        match self.config.lr_override {
            Some(lr) => Ok(lr),
            None => Ok(self.config.lr_scale * noam_lr(step, self.model.config.d_model, self.config.warmup_steps)?),
        }
    }

    /// One optimizer step on batch `self.step`. On a non-finite loss or
    /// gradient the model and optimizer are left untouched.
    pub fn train_step(&mut self, source: &dyn BatchSource) -> Result<StepMetrics> {
        let batch = source.batch(self.step)?;
        let step = self.step + 1;
        let mut pass = Pass::train(Rng::derive(self.config.seed, DROPOUT_STREAM, self.step));
        let (loss, dec) = match self.model.loss(&mut pass, &batch) {
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            other => other?,
        };
        let loss_value = pass.tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, loss: loss_value });
        }
        let grads = pass.tape.backward(loss)?;
        let token_acc = token_accuracy(pass.tape.value(dec.logits).data(), &batch);
        let lr = self.lr_at(step)?;
        let params = &mut self.model.params;
        params.zero_grad();
        grads.accumulate_into(&pass.tape, params);
        if let Some(max) = self.config.clip_norm {
            clip_grad_norm(params, max);
        }
        self.adam.step(params, lr, &self.config.adam)?;
        self.step = step;
        Ok(StepMetrics {
            step,
            lr,
            loss: loss_value,
            token_acc,
        })
    }

    /// Trains until `config.steps` or until `hook` returns [`Flow::Stop`].
    /// The hook sees every step's metrics.
    pub fn run(
        &mut self,
        source: &dyn BatchSource,
        mut hook: impl FnMut(&Trainer, &StepMetrics) -> Result<Flow>,
    ) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let m = self.train_step(source)?;
            log.push(m);
            if hook(self, &m)? == Flow::Stop {
                break;
            }
        }
        Ok(log)
    }

    pub fn is_eval_step(&self) -> bool {
        self.config.eval_every > 0 && self.step % self.config.eval_every == 0
    }
}

/// Teacher-forced argmax accuracy over non-pad targets.
fn token_accuracy(logits: &[f64], batch: &Batch) -> f64 {
    let targets = &batch.tgt_out.ids;
    let vocab = logits.len() / targets.len().max(1);
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        total += 1;
        if crate::models::argmax(&logits[i * vocab..(i + 1) * vocab]) == t {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Mean teacher-forced loss (eval mode) over `pairs`, weighted by target
/// tokens.
pub fn mean_loss(model: &Model, pairs: &[Pair], batch_size: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, &model.config.dec_mem_ids());
        let mut pass = Pass::eval();
        let (loss, _) = model.loss(&mut pass, &batch)?;
        let n = batch.target_tokens();
        sum += pass.tape.value(loss).data()[0] * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Position-wise agreement of the greedy output with the reference,
    /// over reference tokens.
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub bleu4: f64,
    pub count: usize,
}

/// Greedy-decodes every source and scores against its reference. Output
/// length is capped at the longest reference in the batch plus one.
pub fn evaluate(model: &Model, pairs: &[Pair], batch_size: usize) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let mut hyps: Vec<Vec<usize>> = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|p| p.0.clone()).collect();
        let cap = chunk.iter().map(|p| p.1.len()).max().unwrap_or(0) + 1;
        hyps.extend(model.greedy_decode(&srcs, cap)?);
    }
    Ok(score(&hyps, pairs))
}

/// Metrics for precomputed hypotheses.
pub fn score(hyps: &[Vec<usize>], pairs: &[Pair]) -> EvalMetrics {
    let refs: Vec<&[usize]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    let (mut hit, mut total, mut exact) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(&refs) {
        total += r.len();
        hit += h.iter().zip(r.iter()).filter(|(a, b)| a == b).count();
        if h.as_slice() == *r {
            exact += 1;
        }
    }
    let n = pairs.len();
    EvalMetrics {
        token_accuracy: if total == 0 { 1.0 } else { hit as f64 / total as f64 },
        sequence_accuracy: exact as f64 / n as f64,
        bleu4: corpus_bleu(hyps, &refs).score,
        count: n,
    }
}
