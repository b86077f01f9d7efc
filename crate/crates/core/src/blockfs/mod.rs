//! Replicated immutable-block store with chunk-level repair.
//!
//! Each block replica is a payload file plus a sidecar of CRC32s, one per
//! 512-byte checksum chunk. A direct read streams the block from one datanode
//! in 64 KiB transfer chunks; a transfer chunk with bad checksum chunks is
//! fetched from the next replica, then the next, and if no copy of a
//! checksum chunk verifies, the three versions are merged bit by bit by
//! majority vote. Repairs are written back to the serving replica.
//!
//! A legacy read instead abandons a replica at its first checksum failure.

mod datanode;
mod namenode;
pub mod wire;

use std::io;
use std::sync::Arc;

use thiserror::Error;

use crate::fault::StorageEnv;
use crate::metafile::MetaError;

pub use datanode::{chunk_checksums, failing_chunks, Datanode};
pub use namenode::{BlockMeta, Namenode, StorageInfo, JOURNAL_FILE, SEEN_TXID_FILE, VERSION_FILE};
pub use wire::{BlockMessage, TransferChunk};

pub type BlockId = u64;
pub type DatanodeId = usize;

pub const CHECKSUM_CHUNK: usize = 512;
pub const TRANSFER_CHUNK: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("need {need} datanodes, have {have}")]
    InsufficientReplicas { need: usize, have: usize },
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("unknown file {0}")]
    UnknownFile(String),
    #[error("block {block}: unrecoverable checksum error at byte {offset}")]
    ReadFailed { block: BlockId, offset: u64 },
    /// The block was deleted while a repair was in progress; the original
    /// checksum error is returned.
    #[error("block {block} deleted during repair; checksum error at byte {offset}")]
    BlockDeleted { block: BlockId, offset: u64 },
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error("namespace: {0}")]
    Namespace(String),
    #[error("i/o on {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: io::Error,
    },
}

impl BlockError {
    pub fn io(file: &str, source: io::Error) -> Self {
        BlockError::Io { file: file.to_string(), source }
    }
}

/// How a legacy reader continues after abandoning a replica.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LegacyPolicy {
    /// Re-read the whole block from the next replica.
    #[default]
    WholeReplica,
    /// Continue from the failing offset on the next replica.
    ResumeAtOffset,
}

/// Simulated time charged for reads.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockCost {
    pub disk_byte_ns: u64,
    pub net_latency_us: u64,
    pub net_byte_ns: u64,
    pub vote_us: u64,
}

impl Default for BlockCost {
    fn default() -> Self {
        Self { disk_byte_ns: 1, net_latency_us: 200, net_byte_ns: 8, vote_us: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockFsConfig {
    pub datanodes: usize,
    pub replication: usize,
    pub block_size: usize,
    pub legacy_policy: LegacyPolicy,
    pub cost: BlockCost,
}

impl Default for BlockFsConfig {
    fn default() -> Self {
        Self { datanodes: 3, replication: 3, block_size: 8 << 20, legacy_policy: LegacyPolicy::WholeReplica, cost: BlockCost::default() }
    }
}

/// Per-read accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadStats {
    /// Checksum chunks repaired on the serving replica.
    pub repairs: usize,
    /// Transfer chunks fetched from other replicas.
    pub remote_chunks: usize,
    /// Reply frames on the wire, headers and checksums included.
    pub remote_bytes: u64,
    /// Block payload bytes received from other replicas.
    pub remote_data_bytes: u64,
    /// Checksum chunks rebuilt by majority vote.
    pub voted_chunks: usize,
    /// Distinct transfer chunks of the serving replica that needed repair.
    pub corrupt_transfer_chunks: usize,
    /// Replicas abandoned by a legacy read.
    pub replicas_abandoned: usize,
    pub latency_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRead {
    pub data: Vec<u8>,
    pub stats: ReadStats,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScrubReport {
    pub blocks_scanned: usize,
    /// `(block, byte offset)` of each repaired checksum chunk.
    pub repaired: Vec<(BlockId, u64)>,
    pub failed: Vec<(BlockId, u64)>,
}

impl ScrubReport {
    pub fn is_empty(&self) -> bool {
        self.repaired.is_empty() && self.failed.is_empty()
    }
}

/// Bitwise majority of three equal-length buffers.
pub fn majority_vote(a: &[u8], b: &[u8], c: &[u8]) -> Vec<u8> {
    assert!(a.len() == b.len() && b.len() == c.len(), "vote needs equal lengths");
    a.iter().zip(b).zip(c).map(|((&x, &y), &z)| (x & y) | (x & z) | (y & z)).collect()
}

/// Hooks that let tests interleave operations with a read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadHooks {
    /// Delete the block right before the first remote fetch.
    pub delete_before_fetch: bool,
}

#[derive(Debug)]
pub struct BlockFs {
    config: BlockFsConfig,
    namenode: Namenode,
    datanodes: Vec<Datanode>,
    next_placement: usize,
}

impl BlockFs {
    pub fn new(config: BlockFsConfig) -> Result<Self, BlockError> {
        let nn = Arc::new(StorageEnv::in_memory());
        let dns = (0..config.datanodes).map(|_| Arc::new(StorageEnv::in_memory())).collect();
        Self::with_envs(config, nn, dns)
    }

    pub fn with_envs(config: BlockFsConfig, namenode_env: Arc<StorageEnv>, datanode_envs: Vec<Arc<StorageEnv>>) -> Result<Self, BlockError> {
        let namenode = Namenode::open(namenode_env)?;
        let datanodes = datanode_envs.into_iter().enumerate().map(|(i, env)| Datanode::new(i, env)).collect();
        Ok(Self { config, namenode, datanodes, next_placement: 0 })
    }

    pub fn config(&self) -> &BlockFsConfig {
        &self.config
    }

    pub fn namenode(&self) -> &Namenode {
        &self.namenode
    }

    pub fn datanode(&self, id: DatanodeId) -> &Datanode {
        &self.datanodes[id]
    }

    pub fn datanodes(&self) -> &[Datanode] {
        &self.datanodes
    }

    pub fn set_legacy_policy(&mut self, policy: LegacyPolicy) {
        self.config.legacy_policy = policy;
    }

    /// Stores `data` as one block on `replication` datanodes.
    pub fn write_block(&mut self, data: &[u8]) -> Result<BlockId, BlockError> {
        let (need, have) = (self.config.replication, self.datanodes.len());
        if have < need || need == 0 {
            return Err(BlockError::InsufficientReplicas { need, have });
        }
        let id = self.namenode.allocate_block();
        let targets: Vec<DatanodeId> = (0..need).map(|i| (self.next_placement + i) % have).collect();
        self.next_placement = (self.next_placement + 1) % have;
        for &t in &targets {
            self.datanodes[t].store_block(id, data).map_err(|e| BlockError::io(&Datanode::payload_name(id), e))?;
        }
        self.namenode.add_block(id, data.len() as u64, targets)?;
        Ok(id)
    }

    /// Splits `data` into blocks of the configured size.
    pub fn write_file(&mut self, path: &str, data: &[u8]) -> Result<Vec<BlockId>, BlockError> {
        let mut ids = Vec::new();
        for piece in data.chunks(self.config.block_size.max(1)) {
            ids.push(self.write_block(piece)?);
        }
        if data.is_empty() {
            ids.push(self.write_block(&[])?);
        }
        self.namenode.add_file(path, ids.clone())?;
        Ok(ids)
    }

    pub fn read_file(&mut self, path: &str, direct: bool) -> Result<Vec<u8>, BlockError> {
        let ids = self.namenode.file_blocks(path).ok_or_else(|| BlockError::UnknownFile(path.into()))?.to_vec();
        let mut out = Vec::new();
        for id in ids {
            let r = if direct { self.read_block(id)? } else { self.legacy_read_block(id)? };
            out.extend(r.data);
        }
        Ok(out)
    }

    pub fn delete_block(&mut self, id: BlockId) -> Result<(), BlockError> {
        let meta = self.namenode.block_locations(id).ok_or(BlockError::UnknownBlock(id))?.clone();
        self.namenode.delete_block(id)?;
        for d in meta.datanodes {
            let _ = self.datanodes[d].delete_block(id);
        }
        Ok(())
    }

    /// Replica set and length of a block, as the namenode reports it.
    pub fn block_locations(&self, id: BlockId) -> Result<BlockMeta, BlockError> {
        let reply = BlockMessage::Locations {
            block: id,
            len: self.namenode.block_locations(id).ok_or(BlockError::UnknownBlock(id))?.len,
            datanodes: self.namenode.block_locations(id).expect("checked").datanodes.clone(),
        };
        match BlockMessage::decode(&reply.encode()).expect("self-built frame") {
            BlockMessage::Locations { len, datanodes, .. } => Ok(BlockMeta { len, datanodes }),
            _ => unreachable!(),
        }
    }

    pub fn read_block(&mut self, id: BlockId) -> Result<BlockRead, BlockError> {
        self.read_block_with(id, ReadHooks::default())
    }

    /// Direct read served by the block's first datanode.
    pub fn read_block_with(&mut self, id: BlockId, mut hooks: ReadHooks) -> Result<BlockRead, BlockError> {
        let meta = self.block_locations(id)?;
        let serving = meta.datanodes[0];
        let mut stats = ReadStats::default();
        let mut out = Vec::with_capacity(meta.len as usize);
        let mut offset = 0u64;
        while offset < meta.len {
            let len = (meta.len - offset).min(TRANSFER_CHUNK as u64) as usize;
            let chunk = self.repair_chunk(id, &meta.datanodes, serving, offset, len, &mut stats, &mut hooks)?;
            out.extend_from_slice(&chunk);
            offset += len as u64;
        }
        stats.latency_us += meta.len * self.config.cost.net_byte_ns / 1000 + self.config.cost.net_latency_us;
        Ok(BlockRead { data: out, stats })
    }

    fn fetch(&self, from: DatanodeId, block: BlockId, offset: u64, len: usize, stats: &mut ReadStats) -> Option<TransferChunk> {
        let req = BlockMessage::FetchChunk { block, offset, len: len as u32 }.encode();
        let reply = self.datanodes[from].handle(&req);
        stats.remote_chunks += 1;
        stats.remote_bytes += reply.len() as u64;
        stats.latency_us += 2 * self.config.cost.net_latency_us + reply.len() as u64 * self.config.cost.net_byte_ns / 1000;
        match BlockMessage::decode(&reply).ok()? {
            BlockMessage::ChunkReply(c) if c.data.len() == len => {
                stats.remote_data_bytes += len as u64;
                Some(c)
            }
            _ => None,
        }
    }

    /// Reads one transfer chunk on `serving`, repairing failed checksum
    /// chunks from the other replicas and writing the result back.
    #[allow(clippy::too_many_arguments)]
    fn repair_chunk(
        &mut self,
        id: BlockId,
        replicas: &[DatanodeId],
        serving: DatanodeId,
        offset: u64,
        len: usize,
        stats: &mut ReadStats,
        hooks: &mut ReadHooks,
    ) -> Result<Vec<u8>, BlockError> {
        let cost = self.config.cost.clone();
        let (mut data, sums) = self.datanodes[serving].read_chunk(id, offset, len).map_err(|e| BlockError::io(&Datanode::payload_name(id), e))?;
        stats.latency_us += len as u64 * cost.disk_byte_ns / 1000;
        let mut bad = failing_chunks(&data, &sums);
        if bad.is_empty() {
            return Ok(data);
        }
        let first_error = offset + bad[0] as u64 * CHECKSUM_CHUNK as u64;
        stats.corrupt_transfer_chunks += 1;
        let piece = |buf: &[u8], i: u32| {
            let s = i as usize * CHECKSUM_CHUNK;
            s..(s + CHECKSUM_CHUNK).min(buf.len())
        };
        let mut versions: Vec<Vec<u8>> = vec![data.clone()];
        let repaired_count = bad.len();
        for &peer in replicas.iter().filter(|&&p| p != serving) {
            if bad.is_empty() {
                break;
            }
            if hooks.delete_before_fetch {
                hooks.delete_before_fetch = false;
                self.delete_block(id)?;
            }
            if self.namenode.block_locations(id).is_none() {
                return Err(BlockError::BlockDeleted { block: id, offset: first_error });
            }
            let Some(remote) = self.fetch(peer, id, offset, len, stats) else { continue };
            bad.retain(|&i| {
                let r = piece(&data, i);
                let candidate = &remote.data[r.clone()];
                if crate::checksum::crc32(candidate) == sums[i as usize] {
                    data[r].copy_from_slice(candidate);
                    false
                } else {
                    true
                }
            });
            versions.push(remote.data);
        }
        if !bad.is_empty() {
            if versions.len() < 3 {
                return Err(BlockError::ReadFailed { block: id, offset: first_error });
            }
            for &i in &bad {
                let r = piece(&data, i);
                let voted = majority_vote(&versions[0][r.clone()], &versions[1][r.clone()], &versions[2][r.clone()]);
                stats.latency_us += cost.vote_us;
                if crate::checksum::crc32(&voted) != sums[i as usize] {
                    return Err(BlockError::ReadFailed { block: id, offset: offset + r.start as u64 });
                }
                data[r].copy_from_slice(&voted);
                stats.voted_chunks += 1;
            }
        }
        if self.namenode.block_locations(id).is_none() {
            return Err(BlockError::BlockDeleted { block: id, offset: first_error });
        }
        self.datanodes[serving].write_back(id, offset, &data).map_err(|e| BlockError::io(&Datanode::payload_name(id), e))?;
        stats.latency_us += len as u64 * cost.disk_byte_ns / 1000;
        stats.repairs += repaired_count;
        Ok(data)
    }

    /// Baseline read: a replica is dropped at its first checksum failure and
    /// never revisited; the block is missing once every replica is dropped.
    pub fn legacy_read_block(&mut self, id: BlockId) -> Result<BlockRead, BlockError> {
        let meta = self.block_locations(id)?;
        let cost = self.config.cost.clone();
        let mut stats = ReadStats::default();
        let mut out = Vec::with_capacity(meta.len as usize);
        let mut offset = 0u64;
        let mut first_error = None;
        for &dn in &meta.datanodes {
            if self.config.legacy_policy == LegacyPolicy::WholeReplica {
                out.clear();
                offset = 0;
            }
            stats.latency_us += cost.net_latency_us;
            let mut failed = false;
            while offset < meta.len {
                let len = (meta.len - offset).min(TRANSFER_CHUNK as u64) as usize;
                let (data, sums) = self.datanodes[dn].read_chunk(id, offset, len).map_err(|e| BlockError::io(&Datanode::payload_name(id), e))?;
                stats.latency_us += len as u64 * (cost.disk_byte_ns + cost.net_byte_ns) / 1000;
                if let Some(&i) = failing_chunks(&data, &sums).first() {
                    first_error.get_or_insert(offset + i as u64 * CHECKSUM_CHUNK as u64);
                    failed = true;
                    break;
                }
                out.extend_from_slice(&data);
                offset += len as u64;
            }
            if !failed {
                return Ok(BlockRead { data: out, stats });
            }
            stats.replicas_abandoned += 1;
        }
        Err(BlockError::ReadFailed { block: id, offset: first_error.unwrap_or(0) })
    }

    /// Verifies every replica on one datanode, repairing through the direct
    /// read path.
    pub fn scrub(&mut self, dn: DatanodeId) -> ScrubReport {
        let mut report = ScrubReport::default();
        let mut blocks = self.datanodes[dn].blocks();
        blocks.sort_unstable();
        for id in blocks {
            let Ok(meta) = self.block_locations(id) else { continue };
            report.blocks_scanned += 1;
            let mut offset = 0;
            while offset < meta.len {
                let len = (meta.len - offset).min(TRANSFER_CHUNK as u64) as usize;
                let before = match self.datanodes[dn].read_chunk(id, offset, len) {
                    Ok((d, s)) => failing_chunks(&d, &s),
                    Err(_) => break,
                };
                if !before.is_empty() {
                    let mut stats = ReadStats::default();
                    let positions = before.iter().map(|&i| (id, offset + i as u64 * CHECKSUM_CHUNK as u64));
                    match self.repair_chunk(id, &meta.datanodes, dn, offset, len, &mut stats, &mut ReadHooks::default()) {
                        Ok(_) => report.repaired.extend(positions),
                        Err(_) => report.failed.extend(positions),
                    }
                }
                offset += len as u64;
            }
        }
        report
    }

    pub fn scrub_all(&mut self) -> ScrubReport {
        let mut total = ScrubReport::default();
        for dn in 0..self.datanodes.len() {
            let r = self.scrub(dn);
            total.blocks_scanned += r.blocks_scanned;
            total.repaired.extend(r.repaired);
            total.failed.extend(r.failed);
        }
        total
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn never_serves_bad_bytes(
            seed: u64,
            len in 1usize..300_000,
            flips in proptest::collection::vec((0usize..3, any::<prop::sample::Index>()), 0..24),
        ) {
            let mut f = BlockFs::new(BlockFsConfig { block_size: 300_000, ..BlockFsConfig::default() }).unwrap();
            let mut data = vec![0u8; len];
            ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
            let id = f.write_block(&data).unwrap();
            for &(dn, bit) in &flips {
                f.datanode(dn).env().flip_bit(&Datanode::payload_name(id), bit.index(len * 8) as u64).unwrap();
            }
            match f.read_block(id) {
                Ok(r) => prop_assert!(r.data == data),
                Err(BlockError::ReadFailed { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
            match f.legacy_read_block(id) {
                Ok(r) => prop_assert!(r.data == data),
                Err(BlockError::ReadFailed { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn vote_recovers_from_disjoint_damage(a in proptest::collection::vec(any::<u8>(), 1..256), m1 in any::<u64>(), m2 in any::<u64>()) {
            // Bit masks that never touch the same bit of the same byte.
            let b: Vec<u8> = a.iter().enumerate().map(|(i, &x)| x ^ (m1.rotate_left(i as u32) as u8 & 0x0f)).collect();
            let c: Vec<u8> = a.iter().enumerate().map(|(i, &x)| x ^ (m2.rotate_left(i as u32) as u8 & 0xf0)).collect();
            prop_assert_eq!(majority_vote(&a, &b, &c), a.clone());
            prop_assert_eq!(majority_vote(&b, &c, &a), a);
        }
    }
}
