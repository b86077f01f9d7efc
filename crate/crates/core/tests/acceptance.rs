//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero when any fails. Pass a criterion number to run just that one.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use direct_store::blockfs::{BlockError, BlockFs, BlockFsConfig, Datanode, Namenode, CHECKSUM_CHUNK, SEEN_TXID_FILE, TRANSFER_CHUNK, VERSION_FILE};
use direct_store::error_model::{max_tolerable_uber, monte_carlo_error, p_block_error, p_chunk_error, ErrorModelParams, RecoveryMode};
use direct_store::experiment::{run_blockfs_experiment, run_model_table, ExperimentSpec, ReadMode, System};
use direct_store::fault::StorageEnv;
use direct_store::lsm::{CorruptKeyRange, LsmError, Options, Record, Snapshot, SstBuilder, SstReader, Store, WriteOp};
use direct_store::metafile::copy_name;
use direct_store::replication::{replay_prefix, CompactTarget, GroupConfig, RecoveryRecord, ReplicaEvent, ShardGroup};

type Outcome = Result<String, String>;
type Kv = Vec<(Vec<u8>, Vec<u8>)>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn rel(x: f64, want: f64) -> f64 {
    ((x - want) / want).abs()
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(())
}

// ---------------------------------------------------------------- model

fn table_reproduction() -> Outcome {
    let start = Instant::now();
    let t = run_model_table();
    let took = start.elapsed();
    for (mode, uber, want) in [("block", 1e-10, 1e-3), ("block", 1e-15, 1e-18), ("chunk", 1e-10, 3e-10)] {
        let r = t.find("table", mode, uber).ok_or(format!("no {mode} row at {uber:e}"))?;
        let approx = r.approx.unwrap_or(f64::NAN);
        ensure!(rel(r.exact, want) <= 0.1, "{mode} {uber:e}: exact {:.3e} vs {want:e}", r.exact);
        ensure!(rel(approx, want) <= 0.1, "{mode} {uber:e}: approx {approx:.3e} vs {want:e}");
    }
    let with = t.find("table_flagged:with_block_over_chunk_factor", "chunk", 1e-15).ok_or("missing flagged row (with factor)")?;
    let without = t.find("table_flagged:without_block_over_chunk_factor", "chunk", 1e-15).ok_or("missing flagged row (without factor)")?;
    let ratio = with.approx.unwrap() / without.approx.unwrap();
    let b_over_c = with.block_bits as f64 / with.chunk_bits as f64;
    ensure!(rel(ratio, b_over_c) < 1e-9, "flagged rows differ by {ratio}, expected B/C = {b_over_c}");
    ensure!(took < Duration::from_secs(1), "table took {took:?}");
    Ok(format!(
        "block {:.2e}/{:.2e}, chunk {:.2e}; 1e-15 chunk {:.3e} with B/C, {:.3e} without; {:.1} ms",
        t.find("table", "block", 1e-10).unwrap().exact,
        t.find("table", "block", 1e-15).unwrap().exact,
        t.find("table", "chunk", 1e-10).unwrap().exact,
        with.approx.unwrap(),
        without.approx.unwrap(),
        took.as_secs_f64() * 1e3
    ))
}

/// (uber, block bits, chunk bits, replicas, block-mode exact, chunk-mode exact),
/// computed at 40 significant digits.
const GRID: [(f64, u64, u64, u32, f64, f64); 24] = [
    (1e-2, 256, 64, 1, 0.92368501609340603, 0.92368501609340603),
    (1e-2, 256, 128, 2, 0.85319400895547576, 0.77324465390349982),
    (1e-2, 512, 64, 3, 0.98262962826846243, 0.59476054849832901),
    (1e-2, 512, 512, 2, 0.98838596516807454, 0.98838596516807454),
    (1e-2, 1024, 64, 2, 0.99993216373967471, 0.98308387143386077),
    (1e-2, 1024, 128, 3, 0.9998982473351909, 0.97791336303597991),
    (1e-2, 256, 64, 3, 0.78808252189283623, 0.36341579386410238),
    (1e-2, 512, 128, 1, 0.9941760232313363, 0.9941760232313363),
    (1e-3, 4096, 64, 3, 0.9510075005112466, 0.015157254374503176),
    (1e-3, 2048, 128, 2, 0.75888398986231426, 0.20774062652611628),
    (1e-3, 4096, 512, 3, 0.9510075005112466, 0.41295017220878913),
    (1e-3, 1024, 64, 1, 0.64102852181028963, 0.64102852181028963),
    (1e-3, 4096, 128, 2, 0.9670656588203264, 0.37232508514276923),
    (1e-3, 2048, 512, 3, 0.66109380267456894, 0.23380823040754942),
    (1e-3, 512, 64, 2, 0.1606869073306671, 0.030365608043833246),
    (1e-3, 4096, 64, 2, 0.9670656588203264, 0.21861676553337248),
    (1e-4, 4096, 64, 1, 0.33609783442664304, 0.33609783442664304),
    (1e-4, 4096, 128, 3, 0.037966200995374946, 6.584172604959923e-5),
    (1e-4, 4096, 512, 2, 0.11296175430627916, 0.019758165310916168),
    (1e-4, 2048, 64, 2, 0.034298329577188278, 0.0013016710542566442),
    (1e-4, 1024, 128, 3, 0.00092219612801081765, 1.6460837946718473e-5),
    (1e-4, 4096, 64, 3, 0.037966200995374946, 1.661935935918621e-5),
    (1e-4, 512, 512, 1, 0.049913798583322611, 0.049913798583322611),
    (1e-4, 4096, 512, 3, 0.037966200995374946, 0.00099440394048259426),
];

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    const TRIALS: u64 = 10_000_000;
    let mut worst = (0.0f64, String::new());
    for (i, &(e, b, c, r, want_block, want_chunk)) in GRID.iter().enumerate() {
        let p = ErrorModelParams::from_bits(e, b, c, r).map_err(|x| x.to_string())?;
        for (mode, exact, want) in [(RecoveryMode::Block, p_block_error(&p).exact, want_block), (RecoveryMode::Chunk, p_chunk_error(&p).exact, want_chunk)] {
            let label = format!("E={e:e} B={b} C={c} R={r} {mode:?}");
            ensure!(rel(exact, want) < 1e-12, "{label}: closed form {exact:e} vs reference {want:e}");
            let mc = monte_carlo_error(&p, mode, TRIALS, 0xacce_5500 + i as u64).map_err(|x| x.to_string())?;
            let z = mc.z_score(exact);
            ensure!(z <= 3.0, "{label}: Monte Carlo {:.6e} vs exact {exact:.6e}, z={z:.2}", mc.estimate);
            if z > worst.0 {
                worst = (z, label);
            }
        }
    }
    within(start, Duration::from_secs(300))?;
    Ok(format!("{} instances x 2 modes x {TRIALS} trials; largest z {:.2} ({})", GRID.len(), worst.0, worst.1))
}

// ---------------------------------------------------------------- kv safety

fn key(i: usize) -> Vec<u8> {
    format!("key{i:05}").into_bytes()
}

/// Independent model of the write history: what a store holds after the
/// writes logged below a given index.
#[derive(Default)]
struct History {
    writes: Vec<(u64, Vec<WriteOp>)>,
}

impl History {
    fn state_before(&self, index: u64) -> BTreeMap<Vec<u8>, Option<Vec<u8>>> {
        let mut m = BTreeMap::new();
        for (i, ops) in &self.writes {
            if *i >= index {
                continue;
            }
            for op in ops {
                match op {
                    WriteOp::Put(k, v) => m.insert(k.clone(), Some(v.clone())),
                    WriteOp::Delete(k) => m.insert(k.clone(), None),
                };
            }
        }
        m
    }
}

fn live(m: &BTreeMap<Vec<u8>, Option<Vec<u8>>>, ranges: &[CorruptKeyRange]) -> Kv {
    m.iter().filter(|(k, _)| ranges.iter().any(|r| r.contains(k))).filter_map(|(k, v)| v.clone().map(|v| (k.clone(), v))).collect()
}

fn in_ranges(kvs: Kv, ranges: &[CorruptKeyRange]) -> Kv {
    kvs.into_iter().filter(|(k, _)| ranges.iter().any(|r| r.contains(k))).collect()
}

/// Flips one bit inside a random data block of a random table on `replica`.
/// Returns the table id and the block's key range.
fn flip_random_block(g: &ShardGroup, replica: usize, rng: &mut ChaCha8Rng) -> Option<(u64, CorruptKeyRange)> {
    let store = g.replica(replica).store();
    let files = store.files();
    if files.is_empty() {
        return None;
    }
    let f = &files[rng.random_range(0..files.len())];
    let sst = store.file(f.id)?;
    if sst.index().is_empty() {
        return None;
    }
    let i = rng.random_range(0..sst.index().len());
    let ie = &sst.index()[i];
    let bit = ie.offset * 8 + rng.random_range(0..ie.len as u64 * 8);
    g.replica(replica).env().flip_bit(sst.name(), bit).ok()?;
    Some((f.id, sst.block_range(i)))
}

#[derive(Debug, Default, Clone)]
struct SuiteResult {
    schedules: usize,
    recoveries: usize,
    recovery_failures: usize,
    failed_replicas: usize,
    undetected: usize,
    stalled: usize,
    safety_violations: Vec<String>,
    resurrections: Vec<String>,
    divergences: Vec<String>,
    elapsed: Duration,
    slowest: Duration,
}

fn run_schedule(seed: u64, out: &mut SuiteResult) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = GroupConfig { seed, drop_rate: rng.random_range(0.0..0.08), ..GroupConfig::default() };
    config.replica.cost.jitter_us = rng.random_range(0..3000);
    let memtable = rng.random_range(2048..6144);
    config.replica.store = Options {
        block_capacity: rng.random_range(256..1024),
        memtable_bytes: memtable,
        target_file_bytes: memtable * 2,
        l0_compaction_trigger: rng.random_range(2..5),
        l1_compaction_bytes: memtable as u64 * 8,
        ..Options::default()
    };
    let mut g = ShardGroup::new(config).expect("group starts");
    let key_space = rng.random_range(40..600);
    let batches = rng.random_range(300..1000);
    let mut history = History::default();
    let mut flipped: Vec<(usize, u64, CorruptKeyRange)> = Vec::new();
    let mut deferred: Vec<(usize, u64)> = Vec::new();
    let mut down: Option<usize> = None;

    for _ in 0..batches {
        let ops: Vec<WriteOp> = (0..rng.random_range(1..=4))
            .map(|_| {
                let k = key(rng.random_range(0..key_space));
                if rng.random::<f64>() < 0.25 {
                    WriteOp::Delete(k)
                } else {
                    let len = rng.random_range(4..48);
                    WriteOp::Put(k, (0..len).map(|_| rng.random_range(b'a'..=b'z')).collect())
                }
            })
            .collect();
        let index = match g.propose_write(ops.clone()) {
            Ok(i) => i,
            // Appended at the leader and still commits once messages get through.
            Err(direct_store::replication::GroupError::NoQuorum { index }) => index,
            Err(_) => break,
        };
        history.writes.push((index, ops));

        if rng.random::<f64>() < 0.06 {
            let victim = rng.random_range(0..g.len());
            // One undetected corruption per replica at a time, so that a
            // recovered range is never shadowed by another bad block.
            let outstanding = flipped.iter().any(|(r, id, _)| *r == victim && g.replica(victim).store().file(*id).is_some());
            if !g.replica(victim).is_failed() && !outstanding {
                if let Some((id, range)) = flip_random_block(&g, victim, &mut rng) {
                    flipped.push((victim, id, range));
                    match rng.random_range(0..3) {
                        0 => g.schedule_compaction(victim, CompactTarget::File(id)),
                        1 => deferred.push((victim, id)),
                        _ => {} // found by automatic compaction or the final sweep
                    }
                }
            }
        }
        if rng.random::<f64>() < 0.05 {
            for (r, id) in deferred.drain(..) {
                g.schedule_compaction(r, CompactTarget::File(id));
            }
        }
        if rng.random::<f64>() < 0.03 {
            g.run_for(rng.random_range(0..50_000));
        }
        if rng.random::<f64>() < 0.02 {
            match down.take() {
                Some(r) => g.set_up(r, true),
                None => {
                    let r = rng.random_range(1..g.len());
                    g.set_up(r, false);
                    down = Some(r);
                }
            }
        }
    }
    if let Some(r) = down {
        g.set_up(r, true);
    }
    for (r, id) in deferred {
        g.schedule_compaction(r, CompactTarget::File(id));
    }
    g.settle(120_000_000);
    // Anything still corrupt on a healthy replica gets compacted now.
    for _ in 0..6 {
        let pending: Vec<(usize, u64)> =
            flipped.iter().filter(|(r, id, _)| !g.replica(*r).is_failed() && g.replica(*r).store().file(*id).is_some()).map(|(r, id, _)| (*r, *id)).collect();
        if pending.is_empty() {
            break;
        }
        for (r, id) in pending {
            g.schedule_compaction(r, CompactTarget::File(id));
        }
        g.settle(120_000_000);
    }
    out.undetected += flipped.iter().filter(|(r, id, _)| !g.replica(*r).is_failed() && g.replica(*r).store().file(*id).is_some()).count();

    let entries = g.leader().log().entries().to_vec();
    for rec in g.recoveries() {
        out.recoveries += 1;
        let tag = format!("seed {seed} replica {} index {}", rec.replica, rec.index);
        let Ok(post) = rec.post_state.as_ref() else {
            out.safety_violations.push(format!("{tag}: unreadable after recovery: {:?}", rec.post_state));
            continue;
        };
        let replay = in_ranges(replay_prefix(&entries, rec.index).expect("replay"), &rec.ranges);
        let before = history.state_before(rec.index);
        let model = live(&before, &rec.ranges);
        if *post != replay || *post != model {
            out.safety_violations.push(format!("{tag}: {} keys recovered, replay has {}, model has {}", post.len(), replay.len(), model.len()));
        }
        let present: BTreeSet<&Vec<u8>> = post.iter().map(|(k, _)| k).collect();
        for (k, v) in &before {
            if v.is_none() && rec.ranges.iter().any(|r| r.contains(k)) && present.contains(k) {
                out.resurrections.push(format!("{tag}: deleted key {} visible", String::from_utf8_lossy(k)));
            }
        }
    }
    for e in g.events() {
        match e {
            ReplicaEvent::RecoveryFailed { .. } => out.recovery_failures += 1,
            ReplicaEvent::Fatal { .. } => {}
            _ => {}
        }
    }

    let all: Kv = live(&history.state_before(u64::MAX), &[CorruptKeyRange { low: Vec::new(), high: vec![0xff; 8], file_id: 0, block_offset: 0 }]);
    let full = replay_prefix(&entries, u64::MAX).expect("replay");
    if full != all {
        out.divergences.push(format!("seed {seed}: log replay disagrees with the model"));
    }
    out.failed_replicas += g.replicas().iter().filter(|r| r.is_failed()).count();
    let live = g.replicas().iter().filter(|r| !r.is_failed()).count();
    if g.leader().is_failed() || live < g.len() / 2 + 1 {
        // Nothing commits without the leader and a quorum; corruption found
        // afterwards stays unrepaired.
        out.stalled += 1;
        return;
    }
    for r in g.replicas() {
        if r.is_failed() {
            continue;
        }
        match r.store().scan_all() {
            Ok(kvs) if kvs == all => {}
            Ok(kvs) => out.divergences.push(format!("seed {seed}: replica {} holds {} keys, model {}", r.id(), kvs.len(), all.len())),
            Err(e) => out.divergences.push(format!("seed {seed}: replica {} unreadable: {e}", r.id())),
        }
    }
}

const SCHEDULES: usize = 500;

fn schedule_suite() -> &'static SuiteResult {
    static SUITE: OnceLock<SuiteResult> = OnceLock::new();
    SUITE.get_or_init(|| {
        let start = Instant::now();
        let mut out = SuiteResult::default();
        for s in 0..SCHEDULES {
            let t = Instant::now();
            run_schedule(0x5afe_0000 + s as u64, &mut out);
            out.slowest = out.slowest.max(t.elapsed());
            out.schedules += 1;
        }
        out.elapsed = start.elapsed();
        out
    })
}

fn suite_summary(s: &SuiteResult) -> String {
    format!(
        "{} schedules, {} recoveries, {} recovery failures, {} failed replicas, {} groups without a leader or quorum, {} undetected flips; {:.1}s (slowest schedule {:.0} ms)",
        s.schedules,
        s.recoveries,
        s.recovery_failures,
        s.failed_replicas,
        s.stalled,
        s.undetected,
        s.elapsed.as_secs_f64(),
        s.slowest.as_secs_f64() * 1e3
    )
}

fn kv_safety() -> Outcome {
    let s = schedule_suite();
    ensure!(s.recoveries > 0, "no recoveries exercised: {}", suite_summary(s));
    ensure!(s.safety_violations.is_empty(), "{} violations, first: {}", s.safety_violations.len(), s.safety_violations[0]);
    ensure!(s.divergences.is_empty(), "{} divergences, first: {}", s.divergences.len(), s.divergences[0]);
    ensure!(s.elapsed < Duration::from_secs(600), "suite took {:.0}s", s.elapsed.as_secs_f64());
    Ok(suite_summary(s))
}

fn no_resurrection() -> Outcome {
    let s = schedule_suite();
    ensure!(s.resurrections.is_empty(), "{} resurrections, first: {}", s.resurrections.len(), s.resurrections[0]);
    ensure!(s.safety_violations.is_empty(), "{} recovered ranges disagree with the replay", s.safety_violations.len());
    Ok(format!("0 deleted keys visible over {} recoveries", s.recoveries))
}

// ---------------------------------------------------------------- snapshots

fn filled_group(seed: u64, keys: usize) -> ShardGroup {
    let mut config = GroupConfig { seed, ..GroupConfig::default() };
    config.replica.store = Options { block_capacity: 512, memtable_bytes: 4096, target_file_bytes: 16 * 1024, ..Options::default() };
    let mut g = ShardGroup::new(config).expect("group starts");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..keys * 3 / 2 {
        let k = key(rng.random_range(0..keys));
        let op = if i % 7 == 0 { WriteOp::Delete(k) } else { WriteOp::Put(k, format!("v{i}-{seed}").into_bytes()) };
        g.propose_write(vec![op]).expect("commit");
    }
    assert!(g.settle(60_000_000));
    g
}

fn snapshot_case(seed: u64, victim: usize) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = filled_group(seed, 400);
    let other = filled_group(seed.wrapping_add(1), 200);
    let probe: Vec<Vec<u8>> = (0..8).map(|_| key(rng.random_range(0..400))).collect();
    let view = |s: &Store, snap: &Snapshot| -> (Kv, Vec<Option<Vec<u8>>>) {
        let scan = s.scan_range_at(b"", b"\xff", snap).expect("snapshot scan");
        let gets = probe.iter().map(|k| s.get_at(k, snap).expect("snapshot get")).collect();
        (scan, gets)
    };
    let mut held = Vec::new();
    for (gi, grp) in [&g, &other].into_iter().enumerate() {
        for r in grp.replicas() {
            let snap = r.store().take_snapshot().expect("snapshot");
            let seen = view(r.store(), &snap);
            held.push((gi, r.id(), snap, seen));
        }
    }

    let store = g.replica(victim).store();
    let file = store.files().into_iter().filter(|f| f.blocks > 1).max_by_key(|f| f.blocks).expect("multi-block table");
    let sst = store.file(file.id).unwrap();
    let ie = &sst.index()[rng.random_range(0..sst.index().len())];
    g.replica(victim).env().flip_bit(sst.name(), ie.offset * 8 + rng.random_range(0..ie.len as u64 * 8)).unwrap();
    g.schedule_compaction(victim, CompactTarget::File(file.id));
    let mut steps = 0;
    while !g.events().iter().any(|e| matches!(e, ReplicaEvent::CompactionError { .. })) {
        prop_assert!(g.step() && steps < 100_000, "corruption never detected");
        steps += 1;
    }
    let late = g.replica(victim).store().take_snapshot().unwrap();
    prop_assert!(g.settle(60_000_000));
    prop_assert_eq!(g.recoveries().len(), 1);
    prop_assert_eq!(g.recoveries()[0].replica, victim);
    for i in 0..100 {
        g.propose_write(vec![WriteOp::Put(key(rng.random_range(0..400)), format!("after{i}").into_bytes())]).unwrap();
    }
    prop_assert!(g.settle(60_000_000));

    let victim_store = g.replica(victim).store();
    for snap in held.iter().filter(|h| h.0 == 0 && h.1 == victim).map(|h| &h.2).chain([&late]) {
        prop_assert!(matches!(victim_store.get_at(&probe[0], snap), Err(LsmError::SnapshotInvalidated(_))));
        prop_assert!(matches!(victim_store.scan_range_at(b"", b"\xff", snap), Err(LsmError::SnapshotInvalidated(_))));
        prop_assert!(!victim_store.snapshot_valid(snap));
    }
    for (gi, id, snap, seen) in held.iter().filter(|h| !(h.0 == 0 && h.1 == victim)) {
        let grp = if *gi == 0 { &g } else { &other };
        let now = view(grp.replica(*id).store(), snap);
        prop_assert!(&now == seen, "snapshot on group {} replica {} changed", gi, id);
    }
    Ok(())
}

fn snapshot_invalidation() -> Outcome {
    let cases = 64;
    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    runner.run(&(any::<u64>(), 0usize..3), |(seed, victim)| snapshot_case(seed, victim)).map_err(|e| e.to_string())?;
    Ok(format!("{cases} cases, victim and bystander snapshots checked on two groups"))
}

// ---------------------------------------------------------------- amplification

fn kv_amplification() -> Result<String, String> {
    let mut config = GroupConfig { seed: 77, ..GroupConfig::default() };
    config.replica.store = Options { block_capacity: 4096, memtable_bytes: 64 * 1024, target_file_bytes: 256 * 1024, ..Options::default() };
    let mut g = ShardGroup::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..10_000 {
        g.propose_write(vec![WriteOp::Put(key(i * 2), vec![b'p'; 100])]).map_err(|e| e.to_string())?;
    }
    let mut ratios = Vec::new();
    let mut blocks_hit = 0;
    for round in 0..40 {
        for _ in 0..300 {
            let k = key(rng.random_range(0..20_000));
            let op = if rng.random::<f64>() < 0.1 { WriteOp::Delete(k) } else { WriteOp::Put(k, vec![b'x'; rng.random_range(50..150)]) };
            g.propose_write(vec![op]).map_err(|e| e.to_string())?;
        }
        g.settle(60_000_000);
        let victim = rng.random_range(0..3);
        let store = g.replica(victim).store();
        // Uniform over stored blocks, as a uniform bit error rate would pick.
        let files: Vec<_> = store.files().into_iter().filter(|f| f.blocks >= 3).collect();
        let total: usize = files.iter().map(|f| f.blocks).sum();
        if total == 0 {
            continue;
        }
        let mut pick = rng.random_range(0..total);
        let mut chosen = None;
        for f in files {
            if pick < f.blocks {
                chosen = Some(f);
                break;
            }
            pick -= f.blocks;
        }
        let file = chosen.expect("pick is below the block total");
        let sst = store.file(file.id).unwrap();
        let n = rng.random_range(1..=3);
        let mut picked = BTreeSet::new();
        while picked.len() < n {
            picked.insert(rng.random_range(0..sst.index().len()));
        }
        let mut expected = BTreeSet::new();
        for &i in &picked {
            let ie = &sst.index()[i];
            store.env().flip_bit(sst.name(), ie.offset * 8 + rng.random_range(0..ie.len as u64 * 8)).unwrap();
            let r = sst.block_range(i);
            expected.insert((r.low, r.high));
        }
        let before = g.recoveries().len();
        g.schedule_compaction(victim, CompactTarget::File(file.id));
        ensure!(g.settle(60_000_000), "round {round}: did not settle");
        let recs: Vec<RecoveryRecord> = g.recoveries()[before..].to_vec();
        let got: Vec<(Vec<u8>, Vec<u8>)> = recs.iter().flat_map(|r| r.ranges.iter().map(|x| (x.low.clone(), x.high.clone()))).collect();
        ensure!(got.len() == n, "round {round}: {n} corrupted blocks reported as {} ranges", got.len());
        ensure!(got.iter().cloned().collect::<BTreeSet<_>>() == expected, "round {round}: ranges differ from the corrupted blocks' intervals");
        let entries = g.leader().log().entries().to_vec();
        for rec in &recs {
            let oracle = in_ranges(replay_prefix(&entries, rec.index).unwrap(), &rec.ranges);
            let sent = g
                .events()
                .iter()
                .find_map(|e| match e {
                    ReplicaEvent::PatchSent { request_id, from, keys, .. } if *request_id == rec.request_id && *from == rec.patch_from => Some(*keys),
                    _ => None,
                })
                .ok_or("no patch transfer recorded")?;
            ensure!(sent == oracle.len() && rec.patch_keys == oracle.len(), "round {round}: patch of {sent} keys, {} live keys in range", oracle.len());
            ratios.push(rec.patch_bytes as f64 / rec.store_bytes as f64);
        }
        blocks_hit += n;
    }
    ensure!(ratios.len() >= 20, "only {} recoveries", ratios.len());
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    ensure!(median < 0.1, "median patch/store ratio {median:.4}");
    Ok(format!("kv: {blocks_hit} corrupted blocks -> {} recoveries, one interval each, median patch/store {median:.4}", ratios.len()))
}

fn blockfs_repair_case(seed: u64, bits: &[u64]) -> Result<usize, TestCaseError> {
    let block_size = 8 * TRANSFER_CHUNK;
    let mut fs = BlockFs::new(BlockFsConfig { block_size, ..BlockFsConfig::default() }).unwrap();
    let mut data = vec![0u8; block_size];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
    let id = fs.write_block(&data).unwrap();
    let serving = fs.block_locations(id).unwrap().datanodes[0];
    let bits: BTreeSet<u64> = bits.iter().map(|b| b % (block_size as u64 * 8)).collect();
    for &b in &bits {
        fs.datanode(serving).env().flip_bit(&Datanode::payload_name(id), b).unwrap();
    }
    let chunks: BTreeSet<u64> = bits.iter().map(|b| b / 8 / TRANSFER_CHUNK as u64).collect();
    let read = fs.read_block(id).unwrap();
    prop_assert!(read.data == data);
    prop_assert_eq!(read.stats.remote_chunks, chunks.len());
    prop_assert_eq!(read.stats.corrupt_transfer_chunks, chunks.len());
    prop_assert_eq!(read.stats.remote_data_bytes, (chunks.len() * TRANSFER_CHUNK) as u64);
    prop_assert_eq!(read.stats.voted_chunks, 0);
    Ok(chunks.len())
}

fn error_amplification() -> Outcome {
    let kv = kv_amplification()?;
    let cases = 64;
    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&(any::<u64>(), proptest::collection::vec(any::<u64>(), 1..16)), |(seed, bits)| blockfs_repair_case(seed, &bits).map(|_| ()))
        .map_err(|e| format!("{kv}; blockfs: {e}"))?;
    Ok(format!("{kv}; blockfs: {cases} cases, one 64 KiB transfer per corrupted chunk"))
}

// ---------------------------------------------------------------- tolerance

const DESK_BLOCK: usize = 8 * 1024 * 1024;
const TOLERANCE_READS: usize = 10_000;

fn blockfs_spec(uber: f64, mode: ReadMode, seed: u64) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(System::Blockfs);
    s.ubers = vec![uber];
    s.seed = seed;
    s.blockfs.files = 4;
    s.blockfs.block_size = DESK_BLOCK;
    s.blockfs.reads = TOLERANCE_READS;
    s.blockfs.modes = vec![mode];
    s
}

fn uber_tolerance() -> Outcome {
    let start = Instant::now();
    let bits = DESK_BLOCK as u64 * 8;
    let u_legacy = max_tolerable_uber(0.01, bits, bits, 3, RecoveryMode::Block).map_err(|e| e.to_string())?;
    let legacy = run_blockfs_experiment(&blockfs_spec(u_legacy, ReadMode::Legacy, 71)).map_err(|e| e.to_string())?;
    let ls = legacy.summary(u_legacy, ReadMode::Legacy).ok_or("no legacy summary")?.clone();
    let predicted = p_block_error(&ErrorModelParams::from_bits(u_legacy, bits, bits, 3).unwrap()).exact;
    let z = ls.z.unwrap_or(f64::INFINITY);

    let u_direct = u_legacy * 1e4;
    let direct = run_blockfs_experiment(&blockfs_spec(u_direct, ReadMode::Direct, 72)).map_err(|e| e.to_string())?;
    let ds = direct.summary(u_direct, ReadMode::Direct).ok_or("no direct summary")?.clone();

    // The same multiplier applied to the rate with E*B = 0.02.
    let u_small = 0.02 / bits as f64;
    let small = run_blockfs_experiment(&blockfs_spec(u_small * 1e4, ReadMode::Direct, 73)).map_err(|e| e.to_string())?;
    let ss = small.summary(u_small * 1e4, ReadMode::Direct).ok_or("no direct summary")?.clone();
    let iso = max_tolerable_uber(0.01, bits, 512 * 8, 3, RecoveryMode::Chunk).map_err(|e| e.to_string())? / u_legacy;

    let detail = format!(
        "u_legacy={u_legacy:.3e} (E*B={:.3}): legacy {}/{} failed (model {predicted:.4}, z={z:.2}); direct at {u_direct:.2e}: {}/{} failed (model {:.3e}); direct at 1e4 x {u_small:.2e}: {}/{} failed; iso-error rate ratio {iso:.0}x; {:.0}s",
        u_legacy * bits as f64,
        ls.failures,
        ls.reads,
        ds.failures,
        ds.reads,
        ds.predicted.unwrap_or(f64::NAN),
        ss.failures,
        ss.reads,
        start.elapsed().as_secs_f64()
    );
    ensure!(ls.failure_rate >= 0.01 * 0.7, "legacy failure rate too low: {detail}");
    ensure!(z <= 3.0, "legacy off the model: {detail}");
    ensure!(ls.wrong_data + ds.wrong_data + ss.wrong_data == 0, "served bad bytes: {detail}");
    ensure!(ds.failures == 0, "direct reads failed at 1e4 x u_legacy: {detail}");
    within(start, Duration::from_secs(900))?;
    Ok(detail)
}

// ---------------------------------------------------------------- voting

fn voting() -> Outcome {
    let block_size = 4 * TRANSFER_CHUNK;
    let chunks = [0usize, 1, 127, 200, 511];
    let mut passed = 0;
    for (case, &chunk) in chunks.iter().enumerate() {
        let base = (chunk * CHECKSUM_CHUNK * 8) as u64;
        for colliding in [false, true] {
            let mut fs = BlockFs::new(BlockFsConfig { block_size, ..BlockFsConfig::default() }).unwrap();
            let mut data = vec![0u8; block_size];
            ChaCha8Rng::seed_from_u64(case as u64).fill_bytes(&mut data);
            let id = fs.write_block(&data).unwrap();
            let nodes = fs.block_locations(id).unwrap().datanodes;
            let name = Datanode::payload_name(id);
            let offs: [u64; 3] = if colliding { [17 + case as u64, 17 + case as u64, 4000] } else { [3, 1000 + case as u64, 4095] };
            for (dn, off) in nodes.iter().zip(offs) {
                fs.datanode(*dn).env().flip_bit(&name, base + off).unwrap();
            }
            let result = fs.read_block(id);
            let chunk_offset = (chunk * CHECKSUM_CHUNK) as u64;
            match (colliding, result) {
                (false, Ok(r)) => {
                    ensure!(r.data == data, "chunk {chunk}: vote returned wrong bytes");
                    ensure!(r.stats.voted_chunks == 1, "chunk {chunk}: {} voted chunks", r.stats.voted_chunks);
                }
                (true, Err(BlockError::ReadFailed { offset, .. })) => {
                    ensure!(offset == chunk_offset, "chunk {chunk}: failure reported at {offset}, chunk starts at {chunk_offset}");
                }
                (c, r) => return Err(format!("chunk {chunk} colliding={c}: unexpected {:?}", r.map(|r| r.stats))),
            }
            passed += 1;
        }
    }
    Ok(format!("{passed} constructed cases across {} chunk positions", chunks.len()))
}

// ---------------------------------------------------------------- latency

struct LatencyRun {
    store_bytes: u64,
    median_us: f64,
    recoveries: usize,
    rereplication_us: u64,
}

fn latency_run(keys: usize, seed: u64) -> Result<LatencyRun, String> {
    let mut config = GroupConfig { seed, ..GroupConfig::default() };
    config.replica.store = Options { block_capacity: 4096, memtable_bytes: 64 * 1024, target_file_bytes: 256 * 1024, ..Options::default() };
    let cost = config.replica.cost.clone();
    let mut g = ShardGroup::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..keys {
        g.propose_write(vec![WriteOp::Put(key(i), vec![b'v'; 200])]).map_err(|e| e.to_string())?;
    }
    g.settle(600_000_000);
    for r in 0..3 {
        while g.replica(r).store().needs_compaction().is_some() {
            g.schedule_compaction(r, CompactTarget::Auto);
            g.settle(60_000_000);
        }
    }
    let store_bytes = g.replica(1).store().total_bytes();
    let mut round = 0;
    while g.recoveries().len() < 110 {
        round += 1;
        ensure!(round < 400, "too few recoveries ({})", g.recoveries().len());
        let victim = 1 + round % 2;
        let Some((id, _)) = flip_random_block(&g, victim, &mut rng) else { continue };
        g.schedule_compaction(victim, CompactTarget::File(id));
        ensure!(g.settle(60_000_000), "did not settle");
    }
    let mut lat: Vec<f64> = g.recoveries().iter().map(|r| r.latency_us() as f64).collect();
    lat.sort_by(f64::total_cmp);
    Ok(LatencyRun { store_bytes, median_us: lat[lat.len() / 2], recoveries: lat.len(), rereplication_us: cost.rereplication_us(store_bytes) })
}

fn latency_trend() -> Outcome {
    let small = latency_run(4_000, 91)?;
    let large = latency_run(8_000, 92)?;
    let size_ratio = large.store_bytes as f64 / small.store_bytes as f64;
    let latency_ratio = large.median_us / small.median_us;
    let rerep_ratio = large.rereplication_us as f64 / small.rereplication_us as f64;
    let detail = format!(
        "stores {} / {} bytes (x{size_ratio:.2}); median recovery {:.0} / {:.0} us (x{latency_ratio:.3}) over {} / {} recoveries; re-replication {} / {} us (x{rerep_ratio:.2})",
        small.store_bytes, large.store_bytes, small.median_us, large.median_us, small.recoveries, large.recoveries, small.rereplication_us, large.rereplication_us
    );
    ensure!((1.8..2.2).contains(&size_ratio), "stores are not S and 2S: {detail}");
    ensure!((latency_ratio - 1.0).abs() < 0.2, "recovery latency tracks store size: {detail}");
    ensure!(rel(rerep_ratio, size_ratio) < 0.1, "re-replication is not linear in store size: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- metadata

fn sst_sweep() -> Result<String, String> {
    let records: Vec<Record> = (0..40).map(|i| Record::put(key(i), 100 + i as u64, format!("value{i}"))).collect();
    let mut b = SstBuilder::new(256);
    for r in &records {
        b.add(r.clone());
    }
    let built = b.finish();
    let env = Arc::new(StorageEnv::in_memory());
    let name = "t.sst";
    env.write(name, &built.bytes).unwrap();
    let expected = SstReader::open(env.clone(), name, 1).map_err(|e| e.to_string())?.scan_all().0;
    ensure!(expected == records, "clean table reads back differently");
    let [(a_off, a_len), (b_off, b_len)] = built.meta_offsets;
    let footers = built.bytes.len() as u64 - 72;
    let regions = [("metadata copy A", a_off, a_len as u64), ("metadata copy B", b_off, b_len as u64), ("footers", footers, 72)];
    let mut flips = 0;
    for (label, off, len) in regions {
        for bit in off * 8..(off + len) * 8 {
            env.write(name, &built.bytes).unwrap();
            env.flip_bit(name, bit).unwrap();
            let got = SstReader::open(env.clone(), name, 1).map_err(|e| format!("{label} bit {bit}: {e}"))?;
            ensure!(got.scan_all().0 == records, "{label} bit {bit}: wrong records");
            flips += 1;
        }
    }
    for (label, x, y) in [("both metadata copies", a_off * 8 + 9, b_off * 8 + 9), ("both footers", footers * 8 + 3, (footers + 36) * 8 + 3)] {
        env.write(name, &built.bytes).unwrap();
        env.flip_bit(name, x).unwrap();
        env.flip_bit(name, y).unwrap();
        ensure!(matches!(SstReader::open(env.clone(), name, 1), Err(LsmError::MetadataFatal { .. })), "{label} flipped but the table opened");
    }
    Ok(format!("table: {flips} single flips"))
}

fn snapshot_files(env: &StorageEnv, names: &[String]) -> Vec<(String, Vec<u8>)> {
    names.iter().map(|n| (n.clone(), env.read_all(n).unwrap())).collect()
}

fn restore(env: &StorageEnv, saved: &[(String, Vec<u8>)]) {
    for (n, b) in saved {
        env.write(n, b).unwrap();
    }
}

fn store_sweep() -> Result<String, String> {
    let env = Arc::new(StorageEnv::in_memory());
    let opts = Options { block_capacity: 512, memtable_bytes: 2048, ..Options::default() };
    let store = Store::open(env.clone(), "db", opts.clone()).map_err(|e| e.to_string())?;
    for i in 0..60 {
        store.put(key(i), format!("v{i}")).unwrap();
    }
    store.flush().unwrap();
    let want = store.scan_all().unwrap();
    let want_files: Vec<u64> = store.files().iter().map(|f| f.id).collect();
    let all = store.metadata_files();
    store.close();
    drop(store);
    let saved = snapshot_files(&env, &all);
    let primaries: Vec<String> = all.iter().filter(|n| !n.contains(".copy")).cloned().collect();
    ensure!(primaries.len() == 3, "expected three metadata roles, got {primaries:?}");
    let mut flips = 0;
    for name in &primaries {
        let bits = saved.iter().find(|(n, _)| n == name).unwrap().1.len() as u64 * 8;
        for bit in 0..bits {
            restore(&env, &saved);
            env.flip_bit(name, bit).unwrap();
            let s = Store::open(env.clone(), "db", opts.clone()).map_err(|e| format!("{name} bit {bit}: {e}"))?;
            ensure!(s.scan_all().map_err(|e| e.to_string())? == want, "{name} bit {bit}: wrong contents");
            ensure!(s.files().iter().map(|f| f.id).collect::<Vec<_>>() == want_files, "{name} bit {bit}: wrong file set");
            s.close();
            flips += 1;
        }
    }
    for name in &primaries {
        restore(&env, &saved);
        for copy in all.iter().filter(|n| n.starts_with(name.as_str())) {
            env.flip_bit(copy, 12).unwrap();
        }
        let r = Store::open(env.clone(), "db", opts.clone());
        ensure!(matches!(r, Err(LsmError::Meta(_)) | Err(LsmError::MetadataFatal { .. })), "every copy of {name} flipped but the store opened");
    }
    Ok(format!("store metadata: {flips} single flips"))
}

fn namenode_sweep() -> Result<String, String> {
    let env = Arc::new(StorageEnv::in_memory());
    let mut nn = Namenode::open(env.clone()).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        let id = nn.allocate_block();
        nn.add_block(id, 4096, vec![0, 1, 2]).unwrap();
    }
    let (txid, info) = (nn.txid(), nn.storage_info().clone());
    drop(nn);
    let names: Vec<String> = [VERSION_FILE, SEEN_TXID_FILE].iter().flat_map(|n| (0..3).map(move |i| copy_name(n, i))).collect();
    let saved = snapshot_files(&env, &names);
    let mut flips = 0;
    for name in [VERSION_FILE, SEEN_TXID_FILE] {
        let bits = env.read_all(&copy_name(name, 0)).unwrap().len() as u64 * 8;
        for bit in 0..bits {
            restore(&env, &saved);
            env.flip_bit(&copy_name(name, 0), bit).unwrap();
            let nn = Namenode::open(env.clone()).map_err(|e| format!("{name} bit {bit}: {e}"))?;
            ensure!(nn.txid() == txid && *nn.storage_info() == info, "{name} bit {bit}: state differs");
            flips += 1;
        }
        restore(&env, &saved);
        for i in 0..3 {
            env.flip_bit(&copy_name(name, i), 5).unwrap();
        }
        ensure!(Namenode::open(env.clone()).is_err(), "every copy of {name} flipped but the namenode opened");
    }
    restore(&env, &saved);
    Ok(format!("namenode: {flips} single flips"))
}

fn metadata_duplication() -> Outcome {
    let start = Instant::now();
    let parts = [sst_sweep()?, store_sweep()?, namenode_sweep()?];
    within(start, Duration::from_secs(300))?;
    Ok(format!("{}; all-copy flips fatal; {:.1}s", parts.join(", "), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "table reproduction", table_reproduction),
        (2, "oracle equivalence", oracle_equivalence),
        (3, "kv safety", kv_safety),
        (4, "no stale resurrection", no_resurrection),
        (5, "snapshot invalidation", snapshot_invalidation),
        (6, "error amplification", error_amplification),
        (7, "blockfs uber tolerance", uber_tolerance),
        (8, "majority voting", voting),
        (9, "recovery latency trend", latency_trend),
        (10, "metadata duplication", metadata_duplication),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
