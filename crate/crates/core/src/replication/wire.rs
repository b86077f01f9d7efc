//! Replication messages and their frames.
//!
//! Frame: `u32 len` (of what follows), `u8 version`, `u8 type`, body,
//! `u32 crc` over version, type and body.

use crate::checksum::{strip_crc, DecodeError, Decoder, Encoder};

use super::log::{decode_ranges, encode_ranges, LogEntry, ReplicaId};
use crate::lsm::CorruptKeyRange;

pub const WIRE_VERSION: u8 = 1;

/// The key-value pairs a healthy replica holds in the requested ranges at
/// the request's log position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub request_id: u64,
    pub index: u64,
    pub from: ReplicaId,
    pub records: Vec<(Vec<u8>, Vec<u8>)>,
}

impl Patch {
    pub fn payload_bytes(&self) -> u64 {
        self.records.iter().map(|(k, v)| (k.len() + v.len()) as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    AppendEntry { from: ReplicaId, commit: u64, entries: Vec<LogEntry> },
    Ack { from: ReplicaId, last_index: u64, commit: u64 },
    PatchTransfer(Patch),
    PatchAck { from: ReplicaId, request_id: u64 },
    ReportCorruption { from: ReplicaId, request_id: u64, ranges: Vec<CorruptKeyRange> },
}

const T_APPEND: u8 = 1;
const T_ACK: u8 = 2;
const T_PATCH: u8 = 3;
const T_PATCH_ACK: u8 = 4;
const T_REPORT: u8 = 5;

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u8(WIRE_VERSION);
        match self {
            Message::AppendEntry { from, commit, entries } => {
                e.u8(T_APPEND).u32(*from as u32).u64(*commit).varint(entries.len() as u64);
                for entry in entries {
                    e.bytes(&entry.encode());
                }
            }
            Message::Ack { from, last_index, commit } => {
                e.u8(T_ACK).u32(*from as u32).u64(*last_index).u64(*commit);
            }
            Message::PatchTransfer(p) => {
                e.u8(T_PATCH).u64(p.request_id).u64(p.index).u32(p.from as u32).varint(p.records.len() as u64);
                for (k, v) in &p.records {
                    e.bytes(k).bytes(v);
                }
            }
            Message::PatchAck { from, request_id } => {
                e.u8(T_PATCH_ACK).u32(*from as u32).u64(*request_id);
            }
            Message::ReportCorruption { from, request_id, ranges } => {
                e.u8(T_REPORT).u32(*from as u32).u64(*request_id);
                encode_ranges(&mut e, ranges);
            }
        }
        e.seal_crc();
        let body = e.finish();
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame
    }

    pub fn decode(frame: &[u8]) -> Result<Self, DecodeError> {
        let err = |offset, what| DecodeError { offset, what };
        let (len, body) = frame.split_at_checked(4).ok_or(err(0, "short frame"))?;
        if u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize != body.len() {
            return Err(err(0, "frame length mismatch"));
        }
        let payload = strip_crc(body).ok_or(err(4, "frame checksum mismatch"))?;
        let mut d = Decoder::new(payload);
        if d.u8()? != WIRE_VERSION {
            return Err(err(4, "unsupported wire version"));
        }
        let msg = match d.u8()? {
            T_APPEND => {
                let from = d.u32()? as ReplicaId;
                let commit = d.u64()?;
                let n = d.len_prefix()?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push(LogEntry::decode(d.bytes()?)?);
                }
                Message::AppendEntry { from, commit, entries }
            }
            T_ACK => Message::Ack { from: d.u32()? as ReplicaId, last_index: d.u64()?, commit: d.u64()? },
            T_PATCH => {
                let request_id = d.u64()?;
                let index = d.u64()?;
                let from = d.u32()? as ReplicaId;
                let n = d.len_prefix()?;
                let mut records = Vec::with_capacity(n);
                for _ in 0..n {
                    records.push((d.bytes()?.to_vec(), d.bytes()?.to_vec()));
                }
                Message::PatchTransfer(Patch { request_id, index, from, records })
            }
            T_PATCH_ACK => Message::PatchAck { from: d.u32()? as ReplicaId, request_id: d.u64()? },
            T_REPORT => Message::ReportCorruption {
                from: d.u32()? as ReplicaId,
                request_id: d.u64()?,
                ranges: decode_ranges(&mut d)?,
            },
            _ => return Err(err(5, "unknown message type")),
        };
        if !d.is_empty() {
            return Err(err(d.position(), "trailing bytes"));
        }
        Ok(msg)
    }
}
