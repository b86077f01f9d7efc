//! Metadata blocks and files survive a flip in any single copy.

use std::sync::Arc;

use direct_store::blockfs::{Namenode, SEEN_TXID_FILE, VERSION_FILE};
use direct_store::fault::StorageEnv;
use direct_store::lsm::{Options, Store};
use direct_store::metafile::copy_name;

fn main() {
    let env = Arc::new(StorageEnv::in_memory());
    let opts = Options { memtable_bytes: usize::MAX, ..Options::default() };
    let store = Store::open(env.clone(), "db", opts.clone()).unwrap();
    for i in 0..100 {
        store.put(format!("k{i:03}"), "v").unwrap();
    }
    let info = store.flush().unwrap();
    let sst = store.sst_name(info.id);
    let [(meta_a, _), _] = store.file(info.id).unwrap().meta_copies();
    let files = store.metadata_files();
    drop(store);

    // Damage the first metadata copy inside the table and the first copy of
    // every metadata file.
    env.flip_bit(&sst, meta_a * 8 + 3).unwrap();
    for f in files.iter().filter(|f| !f.contains(".copy")) {
        env.flip_bit(f, 9).unwrap();
    }
    let store = Store::open(env.clone(), "db", opts).unwrap();
    println!("reopened with one bad copy of everything: k042 = {:?}", store.get(b"k042").unwrap().map(String::from_utf8));
    println!("table fell back to its second metadata copy {} time(s)", store.file(info.id).unwrap().meta_fallbacks());

    let nn_env = Arc::new(StorageEnv::in_memory());
    let mut nn = Namenode::open(nn_env.clone()).unwrap();
    let id = nn.allocate_block();
    nn.add_block(id, 4096, vec![0, 1, 2]).unwrap();
    let txid = nn.txid();
    drop(nn);
    nn_env.flip_bit(VERSION_FILE, 40).unwrap();
    nn_env.flip_bit(SEEN_TXID_FILE, 20).unwrap();
    let nn = Namenode::open(nn_env.clone()).unwrap();
    println!("namenode reopened after single-copy flips: txid {} (was {txid})", nn.txid());
    drop(nn);

    for i in 0..3 {
        nn_env.flip_bit(&copy_name(VERSION_FILE, i), 40).unwrap();
    }
    match Namenode::open(nn_env) {
        Ok(_) => println!("unexpected: opened with every VERSION copy bad"),
        Err(e) => println!("every VERSION copy bad -> {e}"),
    }
}
