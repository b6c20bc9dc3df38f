//! Save a cache after a few decode steps and load it back with room to
//! keep decoding.

use bifurcated_attn::attention::ModelConfig;
use bifurcated_attn::bifurcated::AttentionPathPolicy;
use bifurcated_attn::engine::{encode_bytes, prefill, DecodeSession, SamplingConfig, ToyModel};
use bifurcated_attn::kv_cache::KvCache;
use bifurcated_attn::tensor_core::IoLedger;

fn main() -> bifurcated_attn::Result<()> {
    let model = ToyModel::<f32>::new(ModelConfig::new(64, 8, 2, 2)?, 1)?;
    let pre = prefill(
        &model,
        &encode_bytes(b"shared prompt"),
        &mut IoLedger::new(),
    )?;
    let mut s = DecodeSession::new(
        &model,
        &pre,
        4,
        3,
        SamplingConfig::default(),
        AttentionPathPolicy::bifurcated(),
        42,
        1,
    )?;
    for _ in 0..3 {
        s.decode_step()?;
    }
    let mut bytes = Vec::new();
    s.cache().write_snapshot(&mut bytes)?;
    let restored = KvCache::<f32>::read_snapshot(bytes.as_slice(), 16)?;
    let c = s.cache();
    println!("snapshot {} bytes", bytes.len());
    println!(
        "b={} m_c={} m_d={} capacity {} -> {}",
        restored.batch(),
        restored.context_len(),
        restored.decoded_len(),
        c.capacity(),
        restored.capacity()
    );
    println!(
        "stored {} vs materialized {} elements per tensor per layer",
        restored.stored_elements(0),
        restored.materialized_elements(0)
    );
    println!(
        "context checksum {:016x} == {:016x}: {}",
        c.context_checksum(),
        restored.context_checksum(),
        c.context_checksum() == restored.context_checksum()
    );
    Ok(())
}
