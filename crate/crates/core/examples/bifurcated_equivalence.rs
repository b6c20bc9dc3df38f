//! One decode step for a batch sharing a prompt: the naive path
//! materializes the context once per sequence, the bifurcated path reads
//! it once. The outputs are the same bits; the KV traffic is not.

use bifurcated_attn::attention::{CausalSpec, ModelConfig};
use bifurcated_attn::bifurcated::{attend_cached, kv_read_elements, AttentionPath};
use bifurcated_attn::kv_cache::KvCache;
use bifurcated_attn::tensor_core::{IoLedger, Operand, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() -> bifurcated_attn::Result<()> {
    let cfg = ModelConfig::new(64, 8, 2, 1)?;
    let (b, g, p, k) = (8, cfg.groups, cfg.group_size(), cfg.head_dim);
    let (m_c, m_d) = (256, 4);
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut rand = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::<f64>::new(
            shape,
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    };

    let parts = vec![(rand(vec![1, g, m_c, k])?, rand(vec![1, g, m_c, k])?)];
    let mut cache = KvCache::init_from_prefill(parts, b, m_d, &mut IoLedger::new())?;
    cache.append_decode(
        0,
        &rand(vec![b, g, m_d, k])?,
        &rand(vec![b, g, m_d, k])?,
        &mut IoLedger::new(),
    )?;
    let q = rand(vec![b, g, p, 1, k])?;

    let mut outputs = Vec::new();
    for (path, bif) in [
        (AttentionPath::Naive, false),
        (AttentionPath::Bifurcated, true),
    ] {
        let mut ledger = IoLedger::new();
        let out = attend_cached(&q, &cache, 0, CausalSpec::Unmasked, path, &cfg, &mut ledger)?;
        println!(
            "{path:?}: K reads {} V reads {} (formula {}), flops {}",
            ledger.reads_of(Operand::Key),
            ledger.reads_of(Operand::Value),
            kv_read_elements(b, g, k, m_c, m_d, bif),
            ledger.flops
        );
        outputs.push(out);
    }
    let same = outputs[0]
        .data()
        .iter()
        .zip(outputs[1].data())
        .all(|(a, c)| a.to_bits() == c.to_bits());
    println!("bit-identical outputs: {same}");
    Ok(())
}
