//! Log entries and their durable, checksummed on-disk form.

use std::sync::Arc;

use thiserror::Error;

use crate::checksum::{strip_crc, DecodeError, Decoder, Encoder};
use crate::fault::StorageEnv;
use crate::lsm::{CorruptKeyRange, WriteOp};

pub type ReplicaId = usize;

/// Sequence numbers reserved per log entry: entry `i` writes with
/// sequences in `[i << SEQ_SHIFT, (i + 1) << SEQ_SHIFT)`.
pub const SEQ_SHIFT: u32 = 20;

pub fn seq_base(index: u64) -> u64 {
    index << SEQ_SHIFT
}

/// A no-op entry reserving the log position at which a corrupted replica
/// replaces `ranges` with a patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRequest {
    pub request_id: u64,
    pub corrupt_shard: ReplicaId,
    pub ranges: Vec<CorruptKeyRange>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Write(Vec<WriteOp>),
    PatchRequest(PatchRequest),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub index: u64,
    pub payload: Payload,
}

const TAG_WRITE: u8 = 1;
const TAG_PATCH_REQUEST: u8 = 2;

pub(crate) fn encode_ranges(e: &mut Encoder, ranges: &[CorruptKeyRange]) {
    e.varint(ranges.len() as u64);
    for r in ranges {
        e.bytes(&r.low).bytes(&r.high).u64(r.file_id).u64(r.block_offset);
    }
}

pub(crate) fn decode_ranges(d: &mut Decoder<'_>) -> Result<Vec<CorruptKeyRange>, DecodeError> {
    let n = d.len_prefix()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(CorruptKeyRange { low: d.bytes()?.to_vec(), high: d.bytes()?.to_vec(), file_id: d.u64()?, block_offset: d.u64()? });
    }
    Ok(out)
}

impl LogEntry {
    /// Encoded entry followed by its CRC32.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.index);
        match &self.payload {
            Payload::Write(ops) => {
                e.u8(TAG_WRITE).varint(ops.len() as u64);
                for op in ops {
                    match op {
                        WriteOp::Put(k, v) => e.u8(1).bytes(k).bytes(v),
                        WriteOp::Delete(k) => e.u8(0).bytes(k),
                    };
                }
            }
            Payload::PatchRequest(req) => {
                e.u8(TAG_PATCH_REQUEST).u64(req.request_id).u32(req.corrupt_shard as u32);
                encode_ranges(&mut e, &req.ranges);
            }
        }
        e.seal_crc();
        e.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let payload = strip_crc(buf).ok_or(DecodeError { offset: 0, what: "log entry checksum mismatch" })?;
        let mut d = Decoder::new(payload);
        let index = d.u64()?;
        let tag_pos = d.position();
        let payload = match d.u8()? {
            TAG_WRITE => {
                let n = d.len_prefix()?;
                let mut ops = Vec::with_capacity(n);
                for _ in 0..n {
                    let pos = d.position();
                    ops.push(match d.u8()? {
                        1 => WriteOp::Put(d.bytes()?.to_vec(), d.bytes()?.to_vec()),
                        0 => WriteOp::Delete(d.bytes()?.to_vec()),
                        _ => return Err(DecodeError { offset: pos, what: "bad write op" }),
                    });
                }
                Payload::Write(ops)
            }
            TAG_PATCH_REQUEST => Payload::PatchRequest(PatchRequest {
                request_id: d.u64()?,
                corrupt_shard: d.u32()? as ReplicaId,
                ranges: decode_ranges(&mut d)?,
            }),
            _ => return Err(DecodeError { offset: tag_pos, what: "bad entry tag" }),
        };
        if !d.is_empty() {
            return Err(DecodeError { offset: d.position(), what: "trailing bytes" });
        }
        Ok(Self { index, payload })
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log entry at byte {offset} of {file} failed its checksum")]
    Corrupt { file: String, offset: u64 },
    #[error("log entry index {got} where {expected} was expected")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("log i/o on {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

/// Append-only log file: `[u32 len][entry with crc]` per entry. Indices
/// start at 1 and are contiguous.
#[derive(Debug)]
pub struct ReplicaLog {
    env: Arc<StorageEnv>,
    name: String,
    entries: Vec<LogEntry>,
}

impl ReplicaLog {
    /// Opens `name`, replaying any existing entries. A checksum failure is
    /// fatal: the log is not self-healing.
    pub fn open(env: Arc<StorageEnv>, name: &str) -> Result<Self, LogError> {
        let mut entries = Vec::new();
        if env.exists(name) {
            let raw = env.read_all(name).map_err(|source| LogError::Io { file: name.into(), source })?;
            let mut pos = 0usize;
            while pos < raw.len() {
                let corrupt = || LogError::Corrupt { file: name.into(), offset: pos as u64 };
                let len = raw.get(pos..pos + 4).ok_or_else(corrupt)?;
                let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
                let body = raw.get(pos + 4..pos + 4 + len).ok_or_else(corrupt)?;
                let entry = LogEntry::decode(body).map_err(|_| corrupt())?;
                let expected = entries.len() as u64 + 1;
                if entry.index != expected {
                    return Err(LogError::OutOfOrder { expected, got: entry.index });
                }
                entries.push(entry);
                pos += 4 + len;
            }
        }
        Ok(Self { env, name: name.to_string(), entries })
    }

    pub fn last_index(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn get(&self, index: u64) -> Option<&LogEntry> {
        index.checked_sub(1).and_then(|i| self.entries.get(i as usize))
    }

    pub fn entries_from(&self, index: u64, max: usize) -> Vec<LogEntry> {
        let start = index.saturating_sub(1) as usize;
        self.entries.iter().skip(start).take(max).cloned().collect()
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn append(&mut self, entry: LogEntry) -> Result<(), LogError> {
        let expected = self.last_index() + 1;
        if entry.index != expected {
            return Err(LogError::OutOfOrder { expected, got: entry.index });
        }
        let body = entry.encode();
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        self.env.append(&self.name, &frame).map_err(|source| LogError::Io { file: self.name.clone(), source })?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}
