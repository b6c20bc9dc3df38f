//! Verify a multi-token draft in one forward pass. The logits match
//! feeding the draft one token at a time, and the cache is read once
//! instead of once per drafted token.

use bifurcated_attn::attention::ModelConfig;
use bifurcated_attn::bifurcated::AttentionPathPolicy;
use bifurcated_attn::engine::{encode_bytes, prefill, DecodeSession, SamplingConfig, ToyModel};
use bifurcated_attn::tensor_core::IoLedger;

fn main() -> bifurcated_attn::Result<()> {
    let model = ToyModel::<f64>::new(ModelConfig::new(64, 8, 2, 2)?, 4)?;
    let pre = prefill(&model, &encode_bytes(b"draft: "), &mut IoLedger::new())?;
    let draft = vec![encode_bytes(b"abcd"), encode_bytes(b"wxyz")];
    let n_g = draft[0].len();
    let session = || {
        DecodeSession::new(
            &model,
            &pre,
            2,
            n_g,
            SamplingConfig::default(),
            AttentionPathPolicy::bifurcated(),
            0,
            1,
        )
    };

    let mut joint = session()?;
    let all = joint.decode_multi(&draft)?;
    let mut single = session()?;
    let vocab = model.cfg.vocab;
    let mut max_err = 0.0f64;
    for pos in 0..n_g {
        let one = single.decode_multi(&draft.iter().map(|d| vec![d[pos]]).collect::<Vec<_>>())?;
        for bi in 0..2 {
            let a = &all.data()[(bi * n_g + pos) * vocab..][..vocab];
            let e = &one.data()[bi * vocab..][..vocab];
            max_err = a
                .iter()
                .zip(e)
                .fold(max_err, |m, (x, y)| m.max((x - y).abs()));
        }
    }
    println!("max logit difference: {max_err:e}");
    println!(
        "KV reads: one {n_g}-token step {} vs {n_g} single steps {}",
        joint.ledger().kv_reads(),
        single.ledger().kv_reads()
    );
    Ok(())
}
