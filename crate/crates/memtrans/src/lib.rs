//! Command-line workflow and on-disk formats for memory-augmented
//! transformers: run configs, checkpoints, attention dumps and the
//! `memtrans` subcommands.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod dump;
pub mod error;
pub mod hashing;
pub mod runconfig;

pub use error::{Error, Result};
