//! Fit the roofline cost model to this machine and use it to pick the
//! automatic path threshold.

use bifurcated_attn::bench::{calibrate, CalibrationPlan, SampleKind};

fn main() -> bifurcated_attn::Result<()> {
    let r = calibrate(5, &CalibrationPlan::default())?;
    println!("timer resolution {:.1e} s", r.timer_resolution_seconds);
    println!(
        "bandwidth {:.2e} B/s, throughput {:.2e} FLOP/s, overhead {:.2e} s, R^2 {:.3}",
        r.cost_model.bytes_per_second,
        r.cost_model.flops_per_second,
        r.cost_model.fixed_overhead_seconds,
        r.r_squared
    );
    for s in r
        .samples
        .iter()
        .filter(|s| s.kind == SampleKind::Attention && s.n == 1)
    {
        println!(
            "b={:>2} m_c={:>4} {:<10} {:>9.1} us  predicted {:>9.1} us",
            s.b,
            s.m_c,
            format!("{:?}", s.path.expect("attention samples carry a path")),
            s.seconds * 1e6,
            r.cost_model.latency(s.bytes as f64, s.flops as f64) * 1e6
        );
    }
    println!(
        "suggested auto threshold (b * m_c): {:?}",
        r.suggested_auto_threshold
    );
    Ok(())
}
