//! Toy decoder-only transformer and the single-context batch sampling pipeline.

mod model;
mod sampling;
mod session;

pub use model::{decode_bytes, encode_bytes, LayerParams, ToyModel, BOS};
pub use sampling::{nucleus, sample_token, softmax_tempered, SamplingConfig};
pub use session::{
    batch_rng, generate, prefill, rank_sequences, DecodeSession, GenerateOptions, Generation,
    PrefillOutput, RankedSequence, SampledSequence, StepRecord,
};
