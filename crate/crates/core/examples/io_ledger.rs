//! Every kernel charges the ledger; the analytic step model predicts the
//! same numbers row by row.

use bifurcated_attn::attention::ModelConfig;
use bifurcated_attn::bifurcated::AttentionPathPolicy;
use bifurcated_attn::engine::{encode_bytes, prefill, DecodeSession, SamplingConfig, ToyModel};
use bifurcated_attn::io_model::{step_io, StepIoReport};
use bifurcated_attn::tensor_core::IoLedger;

fn main() -> bifurcated_attn::Result<()> {
    let cfg = ModelConfig::new(64, 8, 2, 2)?;
    let model = ToyModel::<f64>::new(cfg, 3)?;
    let pre = prefill(
        &model,
        &encode_bytes(b"count every byte"),
        &mut IoLedger::new(),
    )?;
    let b = 6;
    let mut s = DecodeSession::new(
        &model,
        &pre,
        b,
        2,
        SamplingConfig::default(),
        AttentionPathPolicy::bifurcated(),
        0,
        1,
    )?;
    s.decode_step()?;
    let before = s.ledger().clone();
    s.decode_step()?;
    let step = s.ledger().since(&before);
    let rec = s.steps().last().expect("two steps ran");

    let measured = StepIoReport::from_ledger(&step, cfg.layers, 8);
    let predicted = step_io(&model.cfg, b, rec.m_c, rec.m_d, 1, true)?;
    println!(
        "{:<10} {:>10} {:>10} {:>12} {:>10}",
        "row", "param", "kv", "activation", "flops"
    );
    for (row, io) in &measured.breakdown {
        println!(
            "{row:<10} {:>10} {:>10} {:>12} {:>10}",
            io.param, io.kv, io.activation, io.flops
        );
    }
    println!(
        "analytic model matches ledger: {}",
        predicted.matches_ledger(&measured)
    );
    println!(
        "per-kernel: qk_ctx {:?}\n            qk     {:?}",
        step.kernel("qk_ctx"),
        step.kernel("qk")
    );
    Ok(())
}
