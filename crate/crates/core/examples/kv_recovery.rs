//! A replica finds a corrupted block while compacting, asks the group for a
//! patch, and applies it at its position in the log.

use direct_store::lsm::{Options, WriteOp};
use direct_store::replication::{replay_prefix, CompactTarget, GroupConfig, ReplicaEvent, ShardGroup};

fn main() {
    let mut config = GroupConfig { seed: 1, ..GroupConfig::default() };
    config.replica.store = Options { block_capacity: 1024, memtable_bytes: 16 * 1024, target_file_bytes: 64 * 1024, ..Options::default() };
    let mut group = ShardGroup::new(config).unwrap();
    for i in 0..3000 {
        let op = if i % 17 == 0 {
            WriteOp::Delete(format!("user{:05}", i / 2).into_bytes())
        } else {
            WriteOp::Put(format!("user{:05}", i % 1500).into_bytes(), format!("v{i}-{}", "p".repeat(60)).into_bytes())
        };
        group.propose_write(vec![op]).unwrap();
    }
    group.settle(10_000_000);

    let victim = 2;
    let store = group.replica(victim).store();
    let file = store.files().into_iter().max_by_key(|f| f.blocks).unwrap();
    let sst = store.file(file.id).unwrap();
    println!("replica {victim} holds {} bytes; corrupting block 3 of file {} (level {})", store.total_bytes(), file.id, file.level);
    store.env().flip_bit(sst.name(), sst.index()[3].offset * 8 + 5).unwrap();
    group.schedule_compaction(victim, CompactTarget::File(file.id));
    let settled = group.settle(10_000_000);

    for e in group.events() {
        match e {
            ReplicaEvent::CompactionError { replica, ranges, at, .. } => println!("t={at}us replica {replica} compaction hit {} corrupt range(s)", ranges.len()),
            ReplicaEvent::PatchSent { from, to, keys, bytes, .. } => println!("replica {from} sent a patch of {keys} keys ({bytes} bytes) to {to}"),
            _ => {}
        }
    }
    let rec = &group.recoveries()[0];
    println!("recovered {} at log index {} in {} us", rec.ranges[0], rec.index, rec.latency_us());
    let entries = group.leader().log().entries().to_vec();
    let expected: Vec<_> = replay_prefix(&entries, rec.index).unwrap().into_iter().filter(|(k, _)| rec.ranges.iter().any(|r| r.contains(k))).collect();
    println!("range matches a fresh replay of the log prefix: {}", rec.post_state.as_ref().ok() == Some(&expected));
    println!("settled: {settled}; replicas identical: {}", group.replicas().iter().all(|r| r.store().scan_all().unwrap() == group.leader().store().scan_all().unwrap()));
}
