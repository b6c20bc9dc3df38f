//! Predicted per-step latency of a 7B multi-head model at 8k context,
//! naive against bifurcated, across batch sizes.

use bifurcated_attn::bench::{io_rows, rows_to_csv, IoSweep};
use bifurcated_attn::io_model::CostModel;

fn main() -> bifurcated_attn::Result<()> {
    let mut sweep = IoSweep::table_one("7b-mh-8k");
    sweep.b = vec![1, 2, 4, 8, 16, 32, 64];
    sweep.m_c = vec![8192];
    let rows = io_rows(&sweep, &CostModel::datacenter_gpu())?;
    for r in &rows {
        println!(
            "b={:>3}  naive {:>8.2} ms  bifurcated {:>7.2} ms  ratio {:.2}",
            r.b, r.naive_ms, r.bifurcated_ms, r.latency_ratio
        );
    }
    println!();
    print!("{}", rows_to_csv(&rows));
    Ok(())
}
