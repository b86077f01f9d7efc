//! When every replica of a 512 B chunk is corrupt, a bitwise vote can still
//! rebuild it unless two replicas flipped the same bit.

use direct_store::blockfs::{majority_vote, BlockError, BlockFs, BlockFsConfig, Datanode};

fn flip_all(fs: &BlockFs, id: u64, bits: [u64; 3]) {
    for (dn, bit) in bits.into_iter().enumerate() {
        fs.datanode(dn).env().flip_bit(&Datanode::payload_name(id), bit).unwrap();
    }
}

fn main() {
    println!("vote(1100, 1010, 0110) = {:04b}", majority_vote(&[0b1100], &[0b1010], &[0b0110])[0]);

    let mut fs = BlockFs::new(BlockFsConfig { block_size: 1 << 20, ..BlockFsConfig::default() }).unwrap();
    let data = vec![0x5a; 1 << 20];
    let id = fs.write_block(&data).unwrap();
    let chunk = 8 * 512 * 40;
    flip_all(&fs, id, [chunk + 1, chunk + 900, chunk + 3000]);
    let r = fs.read_block(id).unwrap();
    println!("disjoint flips: data ok = {}, voted chunks = {}", r.data == data, r.stats.voted_chunks);

    let id = fs.write_block(&data).unwrap();
    flip_all(&fs, id, [chunk + 1, chunk + 1, chunk + 3000]);
    match fs.read_block(id) {
        Err(BlockError::ReadFailed { offset, .. }) => println!("colliding flips: read fails at byte {offset}"),
        other => println!("colliding flips: unexpected {other:?}"),
    }
}
