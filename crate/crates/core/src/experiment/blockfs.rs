use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockfs::{BlockError, BlockFs, BlockFsConfig, Datanode, LegacyPolicy};
use crate::error_model::{p_block_error, p_majority_error, ErrorModelParams};
use crate::fault::{InjectorConfig, Scope};

use super::{binomial_z, consistent_with, csv_text, Check, ExperimentError, ExperimentSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadMode {
    Direct,
    Legacy,
}

impl ReadMode {
    pub fn name(self) -> &'static str {
        match self {
            ReadMode::Direct => "direct",
            ReadMode::Legacy => "legacy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReadRow {
    pub read_id: usize,
    pub outcome: &'static str,
    pub repairs: usize,
    pub remote_chunks: usize,
    pub voted_chunks: usize,
    pub latency_ms: f64,
    pub uber: f64,
    pub mode: &'static str,
    pub flips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub uber: f64,
    pub mode: ReadMode,
    pub reads: usize,
    pub failures: usize,
    /// Reads that returned data differing from what was written.
    pub wrong_data: usize,
    pub failure_rate: f64,
    pub stderr: f64,
    /// Model probability of a failed read, where one applies.
    pub predicted: Option<f64>,
    pub z: Option<f64>,
    pub remote_bytes: u64,
    pub median_latency_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BlockfsReport {
    pub rows: Vec<BlockReadRow>,
    pub summaries: Vec<ModeSummary>,
    pub checks: Vec<Check>,
}

impl BlockfsReport {
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        Ok(csv_text("blockfs", &self.rows)?)
    }

    pub fn summary(&self, uber: f64, mode: ReadMode) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.uber == uber && s.mode == mode)
    }
}

/// Model failure probability of one read of a `bytes`-long block.
pub fn predicted_failure(mode: ReadMode, policy: LegacyPolicy, uber: f64, bytes: usize) -> Option<f64> {
    let bits = bytes as u64 * 8;
    match (mode, policy) {
        (ReadMode::Legacy, LegacyPolicy::WholeReplica) => {
            Some(p_block_error(&ErrorModelParams::from_bits(uber, bits, bits, 3).ok()?).exact)
        }
        (ReadMode::Legacy, LegacyPolicy::ResumeAtOffset) => None,
        (ReadMode::Direct, _) => p_majority_error(uber, bits, 512 * 8).ok(),
    }
}

/// Load, corrupt, read, restore: every read sees a fresh at-rest corruption
/// of all replicas of one block, then the originals are put back.
pub fn run_blockfs_experiment(spec: &ExperimentSpec) -> Result<BlockfsReport, ExperimentError> {
    let w = &spec.blockfs;
    let mut report = BlockfsReport { rows: Vec::new(), summaries: Vec::new(), checks: Vec::new() };
    let fail = |e: BlockError| ExperimentError::Run(e.to_string());
    for (ui, &uber) in spec.ubers.iter().enumerate() {
        let run_seed = spec.seed.wrapping_add(ui as u64 * 0x9e37_79b9);
        for &mode in &w.modes {
            let mut fs = BlockFs::new(BlockFsConfig { block_size: w.block_size, legacy_policy: w.legacy_policy, ..BlockFsConfig::default() }).map_err(fail)?;
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let mut blocks = Vec::new();
            for f in 0..w.files {
                let mut data = vec![0u8; w.block_size];
                rng.fill_bytes(&mut data);
                let ids = fs.write_file(&format!("/data/file{f}"), &data).map_err(fail)?;
                blocks.push((ids[0], data));
            }
            for (i, dn) in fs.datanodes().iter().enumerate() {
                let cfg = InjectorConfig::at_rest(uber, run_seed ^ (i as u64 + 1)).with_scope(Scope::glob("*.data").expect("static glob"));
                dn.env().set_injector(Some(cfg));
            }

            let (mut failures, mut wrong, mut remote_bytes) = (0, 0, 0);
            let mut latencies = Vec::with_capacity(w.reads);
            for read_id in 0..w.reads {
                let (id, original) = &blocks[read_id % blocks.len()];
                let name = Datanode::payload_name(*id);
                let mut flips = Vec::new();
                for dn in fs.datanodes() {
                    let r = dn.env().corrupt_at_rest(&[&name]);
                    if let Some(e) = r.aborted {
                        return Err(ExperimentError::Run(e));
                    }
                    flips.push(r.flips);
                }
                if w.scrub_before_read {
                    fs.scrub_all();
                }
                let result = match mode {
                    ReadMode::Direct => fs.read_block(*id),
                    ReadMode::Legacy => fs.legacy_read_block(*id),
                };
                let (outcome, stats) = match result {
                    Ok(r) if r.data == *original => ("ok", r.stats),
                    Ok(r) => {
                        wrong += 1;
                        ("wrong_data", r.stats)
                    }
                    Err(BlockError::ReadFailed { .. }) => {
                        failures += 1;
                        ("read_failed", Default::default())
                    }
                    Err(e) => return Err(fail(e)),
                };
                remote_bytes += stats.remote_bytes;
                let latency_ms = stats.latency_us as f64 / 1000.0;
                latencies.push(latency_ms);
                report.rows.push(BlockReadRow {
                    read_id,
                    outcome,
                    repairs: stats.repairs,
                    remote_chunks: stats.remote_chunks,
                    voted_chunks: stats.voted_chunks,
                    latency_ms,
                    uber,
                    mode: mode.name(),
                    flips: flips.iter().map(Vec::len).sum(),
                });
                for (dn, dn_flips) in fs.datanodes().iter().zip(&flips) {
                    for (_, bit) in dn_flips {
                        let byte = (bit / 8) as usize;
                        dn.env().write_at(&name, byte as u64, &original[byte..byte + 1]).map_err(|e| ExperimentError::Run(e.to_string()))?;
                    }
                }
            }
            latencies.sort_by(f64::total_cmp);
            let n = w.reads.max(1);
            let rate = failures as f64 / n as f64;
            let predicted = predicted_failure(mode, w.legacy_policy, uber, w.block_size);
            let z = predicted.map(|p| binomial_z(failures as u64, n as u64, p));
            report.summaries.push(ModeSummary {
                uber,
                mode,
                reads: w.reads,
                failures,
                wrong_data: wrong,
                failure_rate: rate,
                stderr: (rate * (1.0 - rate) / n as f64).sqrt(),
                predicted,
                z,
                remote_bytes,
                median_latency_ms: latencies.get(latencies.len() / 2).copied().unwrap_or(0.0),
            });
            report.checks.push(Check::new(format!("{} uber={uber:e} serves no bad bytes", mode.name()), wrong == 0, format!("{wrong} wrong reads")));
            if let (Some(p), Some(z)) = (predicted, z) {
                let (ok, tail) = consistent_with(failures as u64, n as u64, p);
                report.checks.push(Check::new(
                    format!("{} uber={uber:e} matches model", mode.name()),
                    ok,
                    format!("{failures}/{} failed, model {p:.4e}, z={z:.2}, tail {tail:.3e}", w.reads),
                ));
            }
        }
    }
    Ok(report)
}
