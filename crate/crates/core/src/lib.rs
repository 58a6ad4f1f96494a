//! Memory-augmented transformer encoder-decoders built on a small dense
//! reverse-mode autodiff engine.
//!
//! The crate is `no_std` + `alloc`. The default `std` feature only enables
//! runtime CPU feature detection inside the GEMM backend; numerical results
//! are identical either way.
//!
//! Layout:
//! - [`numerics`]: tensors, the gradient tape, RNG and kernels.
//! - [`attention`]: masks, scaled dot-product and multi-head attention.
//! - [`models`]: baseline, MemTransformer, MemCtrl (plain and shared),
//!   MemBottleneck (plain and skip) encoder/decoder stacks.
//! - [`data`]: vocabularies, synthetic tasks, tokenization, batching.
//! - [`training`]: Noam schedule, Adam, the training loop, metrics, BLEU.
//! - [`experiments`]: memory lesion grid, memory extension, complexity counters.
//! - [`analysis`]: quadrant decomposition and attention-pattern classification.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod attention;
pub mod data;
pub mod error;
pub mod experiments;
pub mod models;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{ParamId, ParamStore, Parameter, Rng, Tape, Tensor, Var};
