use std::io;
use std::sync::Arc;

use crate::checksum::crc32;
use crate::fault::StorageEnv;

use super::wire::{BlockMessage, TransferChunk};
use super::{BlockId, DatanodeId, CHECKSUM_CHUNK};

/// Checksums of consecutive `CHECKSUM_CHUNK`-byte pieces of `data`.
pub fn chunk_checksums(data: &[u8]) -> Vec<u32> {
    data.chunks(CHECKSUM_CHUNK).map(crc32).collect()
}

/// Indices of pieces of `data` that do not match `checksums`.
pub fn failing_chunks(data: &[u8], checksums: &[u32]) -> Vec<u32> {
    data.chunks(CHECKSUM_CHUNK)
        .zip(checksums)
        .enumerate()
        .filter(|(_, (piece, sum))| crc32(piece) != **sum)
        .map(|(i, _)| i as u32)
        .collect()
}

fn encode_sums(sums: &[u32]) -> Vec<u8> {
    sums.iter().flat_map(|s| s.to_le_bytes()).collect()
}

fn decode_sums(raw: &[u8]) -> Vec<u32> {
    raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}

/// Holds block replicas as a payload file plus a sidecar of little-endian
/// CRC32s, one per checksum chunk.
#[derive(Debug)]
pub struct Datanode {
    id: DatanodeId,
    env: Arc<StorageEnv>,
}

impl Datanode {
    pub fn new(id: DatanodeId, env: Arc<StorageEnv>) -> Self {
        Self { id, env }
    }

    pub fn id(&self) -> DatanodeId {
        self.id
    }

    pub fn env(&self) -> &Arc<StorageEnv> {
        &self.env
    }

    pub fn payload_name(id: BlockId) -> String {
        format!("blk_{id}.data")
    }

    pub fn sidecar_name(id: BlockId) -> String {
        format!("blk_{id}.crc")
    }

    pub fn store_block(&self, id: BlockId, data: &[u8]) -> io::Result<()> {
        self.env.write(&Self::sidecar_name(id), &encode_sums(&chunk_checksums(data)))?;
        self.env.write(&Self::payload_name(id), data)
    }

    pub fn has_block(&self, id: BlockId) -> bool {
        self.env.exists(&Self::payload_name(id))
    }

    pub fn delete_block(&self, id: BlockId) -> io::Result<()> {
        self.env.delete(&Self::payload_name(id))?;
        self.env.delete(&Self::sidecar_name(id))
    }

    pub fn block_len(&self, id: BlockId) -> io::Result<u64> {
        self.env.len(&Self::payload_name(id))
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        self.env
            .list()
            .iter()
            .filter_map(|n| n.strip_prefix("blk_")?.strip_suffix(".data")?.parse().ok())
            .collect()
    }

    /// Reads `len` bytes at `offset` (a multiple of the checksum chunk) and
    /// the checksums covering them.
    pub fn read_chunk(&self, id: BlockId, offset: u64, len: usize) -> io::Result<(Vec<u8>, Vec<u32>)> {
        debug_assert_eq!(offset % CHECKSUM_CHUNK as u64, 0);
        let data = self.env.read_through(&Self::payload_name(id), offset, len)?;
        let first = offset / CHECKSUM_CHUNK as u64;
        let count = len.div_ceil(CHECKSUM_CHUNK);
        let sums = self.env.read_through(&Self::sidecar_name(id), first * 4, count * 4)?;
        Ok((data, decode_sums(&sums)))
    }

    /// Replaces bytes of a stored replica after a successful repair.
    pub fn write_back(&self, id: BlockId, offset: u64, data: &[u8]) -> io::Result<()> {
        self.env.write_at(&Self::payload_name(id), offset, data)
    }

    /// Serves one request frame.
    pub fn handle(&self, frame: &[u8]) -> Vec<u8> {
        let reply = match BlockMessage::decode(frame) {
            Ok(BlockMessage::FetchChunk { block, offset, len }) => match self.read_chunk(block, offset, len as usize) {
                Ok((data, checksums)) => {
                    let bad = failing_chunks(&data, &checksums);
                    BlockMessage::ChunkReply(TransferChunk { block, offset, data, checksums, bad })
                }
                Err(e) => BlockMessage::ChunkError { block, offset, reason: e.to_string() },
            },
            Ok(other) => BlockMessage::ChunkError { block: 0, offset: 0, reason: format!("unexpected request {other:?}") },
            Err(e) => BlockMessage::ChunkError { block: 0, offset: 0, reason: e.to_string() },
        };
        reply.encode()
    }
}
