//! A corrupted data block turns into a key-range report instead of a crash,
//! both on reads and during compaction.

use std::sync::Arc;

use direct_store::fault::StorageEnv;
use direct_store::lsm::{LsmError, Options, Store};

fn main() {
    let opts = Options { block_capacity: 1024, memtable_bytes: usize::MAX, ..Options::default() };
    let store = Store::open(Arc::new(StorageEnv::in_memory()), "db", opts).unwrap();
    for i in 0..2000 {
        store.put(format!("user{i:06}"), format!("profile-{i}-{}", "x".repeat(40))).unwrap();
    }
    let info = store.flush().unwrap();
    println!("flushed file {} with {} blocks, {} bytes", info.id, info.blocks, info.bytes);

    let file = store.file(info.id).unwrap();
    let victim = file.index()[10].clone();
    store.env().flip_bit(file.name(), victim.offset * 8 + 77).unwrap();

    let range = file.block_range(10);
    println!("flipped one bit in block 10 of {}", file.name());
    let inside = (0..2000).map(|i| format!("user{i:06}")).find(|k| range.contains(k.as_bytes())).unwrap();
    match store.get(inside.as_bytes()) {
        Err(LsmError::Corruption(r)) => println!("get({inside}) -> corruption in {r}"),
        other => println!("get({inside}) -> {other:?}"),
    }
    println!("get(user000000) -> {:?}", store.get(b"user000000").unwrap().map(|v| v.len()));

    store.put("user999999", "new").unwrap();
    store.flush().unwrap();
    let report = store.compact_level(0).unwrap();
    println!("compaction read {} records, kept {}, reported {} corrupt range(s):", report.records_in, report.records_out, report.corrupt.len());
    for r in &report.corrupt {
        println!("  {r}");
    }
    println!("outputs wait for a patch before they are installed: pending = {}", store.has_pending_compaction());
}
