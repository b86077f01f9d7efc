//! Chunk-level repair on the read path: one corrupt 512 B checksum chunk is
//! fixed by streaming one 64 KiB chunk from another replica.

use direct_store::blockfs::{BlockFs, BlockFsConfig, Datanode};

fn main() {
    let mut fs = BlockFs::new(BlockFsConfig { block_size: 8 << 20, ..BlockFsConfig::default() }).unwrap();
    let data: Vec<u8> = (0..8 << 20).map(|i: u32| (i.wrapping_mul(2_654_435_761) >> 13) as u8).collect();
    let ids = fs.write_file("/warehouse/part-0000", &data).unwrap();
    let id = ids[0];
    let loc = fs.block_locations(id).unwrap();
    println!("block {id} ({} bytes) on datanodes {:?}", loc.len, loc.datanodes);

    let serving = loc.datanodes[0];
    for bit in [8 * 1_000_000 + 3, 8 * 5_000_000 + 1] {
        fs.datanode(serving).env().flip_bit(&Datanode::payload_name(id), bit).unwrap();
    }

    let legacy = fs.legacy_read_block(id).unwrap();
    println!("legacy read: abandoned {} replica(s), {:.1} ms", legacy.stats.replicas_abandoned, legacy.stats.latency_us as f64 / 1000.0);

    let r = fs.read_block(id).unwrap();
    println!(
        "direct read: data ok = {}, repaired {} chunk(s), fetched {} transfer chunk(s) = {} payload bytes, {:.1} ms",
        r.data == data,
        r.stats.repairs,
        r.stats.remote_chunks,
        r.stats.remote_data_bytes,
        r.stats.latency_us as f64 / 1000.0
    );
    println!("the repair was written back: next read repairs {} chunk(s)", fs.read_block(id).unwrap().stats.repairs);

    fs.datanode(loc.datanodes[2]).env().flip_bit(&Datanode::payload_name(id), 8 * 7_000_000).unwrap();
    let scrub = fs.scrub_all();
    println!("scrub scanned {} block replicas and repaired {:?}", scrub.blocks_scanned, scrub.repaired);
}
