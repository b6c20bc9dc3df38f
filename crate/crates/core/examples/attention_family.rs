//! Multi-head, multi-group and multi-query attention are one layer with a
//! different number of key/value groups. Same hidden size, same query
//! heads; only the cache shrinks.

use bifurcated_attn::attention::{
    attend_naive, project_qkv, AttentionParams, CausalSpec, ModelConfig,
};
use bifurcated_attn::tensor_core::{IoLedger, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> bifurcated_attn::Result<()> {
    let (d, h, tokens) = (64, 8, 12);
    let x = Tensor::<f64>::from_f64(
        [1, tokens, d],
        &(0..tokens * d)
            .map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
            .collect::<Vec<_>>(),
    )?;
    println!(
        "{:>6} {:>10} {:>16} {:>10} {:>12}",
        "g", "kind", "q shape", "kv/pos", "attn params"
    );
    for g in [8, 4, 2, 1] {
        let cfg = ModelConfig::new(d, h, g, 1)?;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let params = AttentionParams::<f64>::random(&cfg, 0.05, &mut rng);
        let mut ledger = IoLedger::new();
        let qkv = project_qkv(&x, &params, &cfg, &mut ledger)?;
        let out = attend_naive(
            &qkv.q,
            &qkv.k_new,
            &qkv.v_new,
            CausalSpec::Causal { offset: 0 },
            &cfg,
            &mut ledger,
        )?;
        let kind = match g {
            _ if g == h => "multi-head",
            1 => "multi-query",
            _ => "multi-group",
        };
        println!(
            "{g:>6} {kind:>10} {:>16} {:>10} {:>12}   out {:?}",
            format!("{:?}", qkv.q.shape()),
            cfg.kv_elements_per_position(),
            params.param_count(),
            out.shape()
        );
    }
    Ok(())
}
