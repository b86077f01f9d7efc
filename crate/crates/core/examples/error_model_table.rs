//! Read-error probabilities for block- vs chunk-level recovery, and the
//! largest error rate each tolerates at a target failure probability.

use direct_store::error_model::{max_tolerable_uber, monte_carlo_error, p_majority_error, ErrorModelParams, RecoveryMode};
use direct_store::experiment::run_model_table;

fn main() {
    let table = run_model_table();
    println!("{:<46} {:>6} {:>7} {:>11} {:>11}", "label", "mode", "uber", "exact", "approx");
    for r in table.rows.iter().filter(|r| r.label.starts_with("table")) {
        println!("{:<46} {:>6} {:>7.0e} {:>11.3e} {:>11.3e}", r.label, r.mode, r.uber, r.exact, r.approx.unwrap_or(f64::NAN));
    }

    let block = 8 * 8 * 1024 * 1024;
    let chunk = 512 * 8;
    println!("\n8 MiB blocks, 512 B chunks, 3 replicas");
    for target in [1e-3, 1e-6, 1e-9] {
        let b = max_tolerable_uber(target, block, chunk, 3, RecoveryMode::Block).unwrap();
        let c = max_tolerable_uber(target, block, chunk, 3, RecoveryMode::Chunk).unwrap();
        println!("  P(read error) <= {target:.0e}: block {b:.3e}, chunk {c:.3e}, ratio {:.0}x", c / b);
    }
    let u = 1e-6;
    println!("  at uber {u:.0e}, chunk recovery with voting fails with p = {:.3e}", p_majority_error(u, block, chunk).unwrap());

    let small = ErrorModelParams::from_bits(1e-3, 2048, 128, 2).unwrap();
    let mc = monte_carlo_error(&small, RecoveryMode::Chunk, 200_000, 7).unwrap();
    let exact = direct_store::error_model::p_chunk_error(&small).exact;
    println!("\nMonte Carlo check (B=2048, C=128, R=2, E=1e-3): {:.4e} +- {:.1e} vs exact {exact:.4e}", mc.estimate, mc.stderr);
}
