//! Sample many continuations of one prompt, deduplicate and rank them by
//! mean log-probability.

use bifurcated_attn::attention::ModelConfig;
use bifurcated_attn::bifurcated::AttentionPathPolicy;
use bifurcated_attn::engine::{
    decode_bytes, encode_bytes, generate, GenerateOptions, SamplingConfig, ToyModel,
};

fn main() -> bifurcated_attn::Result<()> {
    let model = ToyModel::<f32>::new(ModelConfig::new(64, 8, 1, 2)?, 11)?;
    let opts = GenerateOptions {
        batch: 16,
        max_new: 6,
        sampling: SamplingConfig {
            temperature: 0.5,
            top_p: 0.9,
            greedy: false,
        },
        policy: AttentionPathPolicy::auto(64),
        seed: 5,
        workers: 2,
    };
    let g = generate(&model, &encode_bytes(b"fn main() {"), &opts)?;
    for r in g.ranked.iter().take(5) {
        println!(
            "x{:<2} {:>8.3}  {:?}",
            r.multiplicity,
            r.mean_logprob,
            String::from_utf8_lossy(&decode_bytes(&r.tokens))
        );
    }
    println!("{} distinct of {}", g.ranked.len(), g.sequences.len());
    println!(
        "paths: {:?}",
        g.steps.iter().map(|s| s.path).collect::<Vec<_>>()
    );
    println!("KV elements read over the run: {}", g.ledger.kv_reads());
    Ok(())
}
