//! A multi-head model against a multi-query model 10% larger (to match
//! capability). Multi-query pays more in prefill and saves per decode
//! step once the context is long enough, so the winner depends on how
//! many tokens are generated.

use bifurcated_attn::io_model::{capability_equivalent_compare, model_preset, CostModel};

fn main() -> bifurcated_attn::Result<()> {
    let cfg = model_preset("1b-mh")?;
    let cm = CostModel::datacenter_gpu();
    println!(
        "{:>6} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "m_c", "steps", "MH total ms", "MQ total ms", "MH step ms", "MQ step ms"
    );
    for m_c in [256, 1024, 2048, 4096, 8192] {
        for steps in [15, 256] {
            let c = capability_equivalent_compare(&cfg, 1, 1.1, 1, m_c, steps, &cm, 2)?;
            println!(
                "{m_c:>6} {steps:>6} {:>12.2} {:>12.2} {:>12.3} {:>12.3}",
                c.multi_head.total_seconds * 1e3,
                c.counterpart.total_seconds * 1e3,
                c.multi_head.first_step_seconds * 1e3,
                c.counterpart.first_step_seconds * 1e3
            );
        }
    }
    Ok(())
}
