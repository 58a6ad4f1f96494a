//! Dense tensors, reverse-mode autodiff and the kernels behind them.
//!
//! All arithmetic is `f64`. The free functions here are eager wrappers over
//! the same tape operations the models use.

pub mod gradcheck;
pub(crate) mod kernels;
mod params;
mod rng;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{AttnBlock, Gradients, Tape, Var, MASK_SENTINEL};
pub use tensor::Tensor;

use crate::error::Result;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let (a, b) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let out = t.matmul(a, b)?;
    Ok(t.value(out).clone())
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let x = t.leaf(x.clone());
    let out = t.softmax(x, axis)?;
    Ok(t.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut t = Tape::new();
    let (x, g, b) = (t.leaf(x.clone()), t.leaf(gain.clone()), t.leaf(bias.clone()));
    let out = t.layer_norm(x, g, b, eps)?;
    Ok(t.value(out).clone())
}

pub fn dropout(x: &Tensor, p: f64, training: bool, rng: &mut Rng) -> Result<Tensor> {
    let mut t = Tape::new();
    let x = t.leaf(x.clone());
    let out = t.dropout(x, p, training, rng)?;
    Ok(t.value(out).clone())
}

/// Mean negative log-likelihood over targets not equal to `ignore_index`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], ignore_index: usize) -> Result<f64> {
    let mut t = Tape::new();
    let l = t.leaf(logits.clone());
    let out = t.cross_entropy(l, targets, ignore_index)?;
    Ok(t.value(out).data()[0])
}

#[cfg(test)]
mod tests;
