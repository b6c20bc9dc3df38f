//! The randomized equivalence sweep, plus a deliberately broken variant
//! (softmax per branch) to show the sweep catches it.

use bifurcated_attn::bench::{run_equivalence, Fault, SweepSpec};

fn main() -> bifurcated_attn::Result<()> {
    let spec = SweepSpec::default();
    for fault in [Fault::None, Fault::PerBranchSoftmax] {
        let r = run_equivalence(&spec, fault)?;
        println!(
            "{fault:?}: {} cases, {} failures, f64 max abs err {:.1e}, f32 max rel err {:.1e}, io exact {}",
            r.cases.len(),
            r.failures,
            r.max_abs_err_f64,
            r.max_rel_err_f32,
            r.io_exact
        );
    }
    Ok(())
}
