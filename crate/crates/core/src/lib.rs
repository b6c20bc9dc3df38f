//! Multi-group attention with a bifurcated path for single-context batch
//! sampling, an exact IO ledger, an analytic IO and latency model, and a
//! small CPU decoding engine built on top of them.
//!
//! The bifurcated path splits the key/value cache into one shared context
//! part and a per-sequence decode part, so batch sampling from one prompt
//! reads the context keys and values once per step instead of once per
//! sequence. It returns the same numbers as the naive path.

pub mod attention;
pub mod bench;
pub mod bifurcated;
pub mod engine;
pub mod error;
pub mod io_model;
pub mod kv_cache;
pub mod tensor_core;

pub use error::{Error, Result};
