//! Measured read failures of legacy and direct block reads under random
//! at-rest corruption, next to the model predictions.

use direct_store::experiment::{run_blockfs_experiment, ExperimentSpec, ReadMode, System};

fn main() {
    let mut spec = ExperimentSpec::new(System::Blockfs);
    spec.seed = 3;
    spec.ubers = vec![1e-9, 4e-9, 1e-6, 1e-5];
    spec.blockfs.files = 2;
    spec.blockfs.block_size = 8 << 20;
    spec.blockfs.reads = 400;
    let report = run_blockfs_experiment(&spec).unwrap();
    println!("{:>8} {:>7} {:>9} {:>11} {:>13}", "uber", "mode", "failed", "model", "median ms");
    for s in &report.summaries {
        let mode = match s.mode {
            ReadMode::Direct => "direct",
            ReadMode::Legacy => "legacy",
        };
        println!("{:>8.0e} {:>7} {:>4}/{:<4} {:>11.3e} {:>13.2}", s.uber, mode, s.failures, s.reads, s.predicted.unwrap_or(f64::NAN), s.median_latency_ms);
    }
    for c in report.checks.iter().filter(|c| !c.passed) {
        println!("{c}");
    }
}
