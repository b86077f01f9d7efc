//! Applying a patch aborts the snapshots on the repaired replica only.

use direct_store::lsm::{LsmError, Options, WriteOp};
use direct_store::replication::{CompactTarget, GroupConfig, ShardGroup};

fn main() {
    let mut config = GroupConfig::default();
    config.replica.store = Options { block_capacity: 512, memtable_bytes: 4096, target_file_bytes: 16 * 1024, ..Options::default() };
    let mut group = ShardGroup::new(config).unwrap();
    for i in 0..500 {
        group.propose_write(vec![WriteOp::Put(format!("k{i:04}").into_bytes(), format!("v{i}").into_bytes())]).unwrap();
    }
    group.settle(10_000_000);

    let snaps: Vec<_> = group.replicas().iter().map(|r| r.store().take_snapshot().unwrap()).collect();
    let victim = 1;
    let store = group.replica(victim).store();
    let file = store.files().into_iter().find(|f| f.blocks > 2).unwrap();
    let sst = store.file(file.id).unwrap();
    store.env().flip_bit(sst.name(), sst.index()[1].offset * 8).unwrap();
    group.schedule_compaction(victim, CompactTarget::File(file.id));
    group.settle(10_000_000);
    println!("recoveries: {}, snapshots invalidated on the victim: {}", group.recoveries().len(), group.recoveries()[0].stats.invalidated_snapshots);

    for (i, (r, snap)) in group.replicas().iter().zip(&snaps).enumerate() {
        match r.store().get_at(b"k0007", snap) {
            Ok(v) => println!("replica {i}: snapshot read -> {:?}", v.map(String::from_utf8)),
            Err(LsmError::SnapshotInvalidated(id)) => println!("replica {i}: snapshot {id} invalidated"),
            Err(e) => println!("replica {i}: {e}"),
        }
    }
}
