use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fault::{InjectorConfig, Scope};
use crate::lsm::{Options, WriteOp};
use crate::replication::{replay_prefix, Consistency, GroupConfig, ReadError, RecoveryRecord, ReplicaEvent, ShardGroup};

use super::{csv_text, Check, ExperimentError, ExperimentSpec, KvWorkload};

/// One recovery (event = "recovery") or a per-rate total (event = "summary").
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvRow {
    /// Simulated milliseconds since the start of the run.
    pub time: f64,
    pub compaction_errors: usize,
    pub recoveries: usize,
    pub recovery_latency_ms: Option<f64>,
    pub patch_bytes: Option<u64>,
    pub client_errors: usize,
    pub uber: f64,
    pub event: &'static str,
    pub replica: Option<usize>,
    pub patch_keys: Option<usize>,
    pub ranges: Option<usize>,
    pub store_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvSummary {
    pub uber: f64,
    pub compaction_errors: usize,
    pub recoveries: usize,
    pub recovery_failures: usize,
    pub failed_replicas: usize,
    pub client_errors: usize,
    pub compaction_bytes: u64,
    /// Compaction errors per 10^6 bytes read by compactions.
    pub errors_per_mb_compacted: f64,
    pub median_latency_ms: Option<f64>,
    pub median_patch_bytes: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct KvReport {
    pub rows: Vec<KvRow>,
    pub summaries: Vec<KvSummary>,
    pub recoveries: Vec<(f64, RecoveryRecord)>,
    pub checks: Vec<Check>,
}

impl KvReport {
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        Ok(csv_text("kv", &self.rows)?)
    }
}

pub(crate) fn group_config(w: &KvWorkload, seed: u64) -> GroupConfig {
    let mut c = GroupConfig { replicas: w.replicas, seed, drop_rate: w.drop_rate, ..GroupConfig::default() };
    c.replica.assembly_attempts = w.assembly_attempts;
    c.replica.store = Options {
        block_capacity: w.block_capacity,
        memtable_bytes: w.memtable_bytes,
        target_file_bytes: w.memtable_bytes * 4,
        l0_compaction_trigger: 4,
        l1_compaction_bytes: (w.memtable_bytes * 16) as u64,
        ..Options::default()
    };
    c
}

fn key(i: usize) -> Vec<u8> {
    format!("user{i:08}").into_bytes()
}

fn median<T: Copy + PartialOrd>(mut v: Vec<T>) -> Option<T> {
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable"));
    v.get(v.len() / 2).copied()
}

/// Drives a shard group under injection for every rate in the spec and
/// records each recovery.
pub fn run_kv_experiment(spec: &ExperimentSpec) -> Result<KvReport, ExperimentError> {
    let w = &spec.kv;
    let ubers = if spec.ubers.is_empty() { vec![0.0] } else { spec.ubers.clone() };
    let mut report = KvReport { rows: Vec::new(), summaries: Vec::new(), recoveries: Vec::new(), checks: Vec::new() };
    for (ui, &uber) in ubers.iter().enumerate() {
        let run_seed = spec.seed.wrapping_add(ui as u64 * 0x9e37_79b9);
        let mut group = ShardGroup::new(group_config(w, run_seed)).map_err(|e| ExperimentError::Run(e.to_string()))?;
        let scope = Scope::glob("*.sst").expect("static glob");
        for (i, r) in group.replicas().iter().enumerate() {
            let cfg = InjectorConfig { uber, mode: w.injection, seed: run_seed ^ (i as u64 + 1), scope: scope.clone(), sticky: false };
            r.env().set_injector(Some(cfg));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        let mut client_error_times = Vec::new();
        let value = |rng: &mut ChaCha8Rng| -> Vec<u8> { (0..w.value_size).map(|_| rng.random_range(b'a'..=b'z')).collect() };
        for _ in 0..w.ops {
            if rng.random::<f64>() < w.read_fraction {
                let k = key(rng.random_range(0..w.key_space));
                match group.read(&k, Consistency::Eventual) {
                    Err(ReadError::Corruption { .. }) => {
                        client_error_times.push(group.now());
                        let _ = group.read_with_retry(&k, Consistency::Eventual);
                    }
                    _ => {}
                }
            } else {
                let ops = (0..w.batch)
                    .map(|_| {
                        let k = key(rng.random_range(0..w.key_space));
                        if rng.random::<f64>() < w.delete_fraction {
                            WriteOp::Delete(k)
                        } else {
                            WriteOp::Put(k, value(&mut rng))
                        }
                    })
                    .collect();
                if let Err(e) = group.propose_write(ops) {
                    report.checks.push(Check::new(format!("uber={uber:e} writes commit"), false, e.to_string()));
                    break;
                }
            }
        }
        let settled = group.settle(60_000_000);
        report.checks.push(Check::new(format!("uber={uber:e} settles"), settled, format!("simulated time {} ms", group.now() / 1000)));

        let entries = group.leader().log().entries().to_vec();
        let mut compaction_errors = 0;
        let mut recoveries = 0;
        let mut recovery_failures = 0;
        let mut compaction_bytes = 0;
        let mut latencies = Vec::new();
        let mut patch_sizes = Vec::new();
        let mut safety_violations = Vec::new();
        for e in group.events() {
            match e {
                ReplicaEvent::Compaction { bytes_read, .. } => compaction_bytes += bytes_read,
                ReplicaEvent::CompactionError { .. } => compaction_errors += 1,
                ReplicaEvent::RecoveryFailed { .. } => recovery_failures += 1,
                ReplicaEvent::Recovered(rec) => {
                    recoveries += 1;
                    let oracle = replay_prefix(&entries, rec.index).map_err(|e| ExperimentError::Run(e.to_string()))?;
                    let expected: Vec<_> = oracle.into_iter().filter(|(k, _)| rec.ranges.iter().any(|r| r.contains(k))).collect();
                    if rec.post_state.as_ref().ok() != Some(&expected) {
                        safety_violations.push(rec.index);
                    }
                    let latency = rec.latency_us() as f64 / 1000.0;
                    latencies.push(latency);
                    patch_sizes.push(rec.patch_bytes);
                    let errors_so_far = client_error_times.iter().filter(|&&t| t <= rec.completed_at).count();
                    report.rows.push(KvRow {
                        time: rec.completed_at as f64 / 1000.0,
                        compaction_errors,
                        recoveries,
                        recovery_latency_ms: Some(latency),
                        patch_bytes: Some(rec.patch_bytes),
                        client_errors: errors_so_far,
                        uber,
                        event: "recovery",
                        replica: Some(rec.replica),
                        patch_keys: Some(rec.patch_keys),
                        ranges: Some(rec.ranges.len()),
                        store_bytes: Some(rec.store_bytes),
                    });
                    report.recoveries.push((uber, (**rec).clone()));
                }
                _ => {}
            }
        }
        report.checks.push(Check::new(
            format!("uber={uber:e} recovered ranges match log replay"),
            safety_violations.is_empty(),
            format!("{recoveries} recoveries, violations at indices {safety_violations:?}"),
        ));
        if uber == 0.0 {
            let clean = compaction_errors == 0 && client_error_times.is_empty() && recoveries == 0;
            report.checks.push(Check::new("uber=0 is corruption free", clean, format!("{compaction_errors} compaction errors, {} client errors", client_error_times.len())));
        }

        // Convergence once injection stops.
        for r in group.replicas() {
            r.env().set_injector(None);
        }
        group.settle(60_000_000);
        let full = replay_prefix(&entries, u64::MAX).map_err(|e| ExperimentError::Run(e.to_string()))?;
        let live: Vec<_> = group.replicas().iter().filter(|r| !r.is_failed()).collect();
        let diverged: Vec<_> = live.iter().filter(|r| r.store().scan_all().ok().as_ref() != Some(&full)).map(|r| r.id()).collect();
        report.checks.push(Check::new(format!("uber={uber:e} live replicas converge"), diverged.is_empty(), format!("diverged replicas {diverged:?}")));

        let failed_replicas = group.replicas().len() - live.len();
        let summary = KvSummary {
            uber,
            compaction_errors,
            recoveries,
            recovery_failures,
            failed_replicas,
            client_errors: client_error_times.len(),
            compaction_bytes,
            errors_per_mb_compacted: if compaction_bytes == 0 { 0.0 } else { compaction_errors as f64 * 1e6 / compaction_bytes as f64 },
            median_latency_ms: median(latencies),
            median_patch_bytes: median(patch_sizes),
        };
        report.rows.push(KvRow {
            time: group.now() as f64 / 1000.0,
            compaction_errors,
            recoveries,
            recovery_latency_ms: summary.median_latency_ms,
            patch_bytes: summary.median_patch_bytes,
            client_errors: summary.client_errors,
            uber,
            event: "summary",
            replica: None,
            patch_keys: None,
            ranges: None,
            store_bytes: None,
        });
        report.summaries.push(summary);
    }
    Ok(report)
}
