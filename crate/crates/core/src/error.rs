use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on axis `{axis}` (expected {expected}, found {found})")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found rank {found}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("softmax over an empty axis is undefined")]
    EmptySoftmax,

    #[error("attention over zero keys")]
    EmptyKeys,

    #[error("causal mask offset {offset} with {queries} queries exceeds {keys} keys")]
    MaskOffset {
        offset: usize,
        queries: usize,
        keys: usize,
    },

    #[error("multi-token attention ({queries} queries) requires a causal mask offset")]
    MissingMask { queries: usize },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("batch mismatch: cache holds {expected} sequences, got {found}")]
    BatchMismatch { expected: usize, found: usize },

    #[error("batch size must be at least 1")]
    EmptyBatch,

    #[error(
        "decode capacity exhausted: {used} of {capacity} positions used, {requested} requested"
    )]
    CapacityExhausted {
        used: usize,
        capacity: usize,
        requested: usize,
    },

    #[error("context of {len} tokens overflows {max} positions")]
    ContextOverflow { len: usize, max: usize },

    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("logits contain a non-finite value")]
    NonFiniteLogits,

    #[error("invalid sampling parameters: {0}")]
    Sampling(String),

    #[error("invalid sweep spec: {0}")]
    Sweep(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
