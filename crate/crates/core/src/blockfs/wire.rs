//! Block store messages. Same framing as the shard-group messages:
//! `u32 len`, `u8 version`, `u8 type`, body, `u32 crc`.

use crate::checksum::{strip_crc, DecodeError, Decoder, Encoder};

use super::{BlockId, DatanodeId};

pub const WIRE_VERSION: u8 = 1;

/// Up to one transfer chunk of a block with the checksums covering it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferChunk {
    pub block: BlockId,
    pub offset: u64,
    pub data: Vec<u8>,
    pub checksums: Vec<u32>,
    /// Indices (within this chunk) of checksum chunks that failed the
    /// sender's verification. The data is sent anyway so the receiver can
    /// vote over it.
    pub bad: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockMessage {
    GetBlockLocations { block: BlockId },
    Locations { block: BlockId, len: u64, datanodes: Vec<DatanodeId> },
    ReadBlock { block: BlockId, offset: u64 },
    FetchChunk { block: BlockId, offset: u64, len: u32 },
    ChunkReply(TransferChunk),
    ChunkError { block: BlockId, offset: u64, reason: String },
}

const T_GET_LOCATIONS: u8 = 1;
const T_LOCATIONS: u8 = 2;
const T_READ_BLOCK: u8 = 3;
const T_FETCH: u8 = 4;
const T_REPLY: u8 = 5;
const T_ERROR: u8 = 6;

impl BlockMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u8(WIRE_VERSION);
        match self {
            BlockMessage::GetBlockLocations { block } => {
                e.u8(T_GET_LOCATIONS).u64(*block);
            }
            BlockMessage::Locations { block, len, datanodes } => {
                e.u8(T_LOCATIONS).u64(*block).u64(*len).varint(datanodes.len() as u64);
                for d in datanodes {
                    e.u32(*d as u32);
                }
            }
            BlockMessage::ReadBlock { block, offset } => {
                e.u8(T_READ_BLOCK).u64(*block).u64(*offset);
            }
            BlockMessage::FetchChunk { block, offset, len } => {
                e.u8(T_FETCH).u64(*block).u64(*offset).u32(*len);
            }
            BlockMessage::ChunkReply(c) => {
                e.u8(T_REPLY).u64(c.block).u64(c.offset).bytes(&c.data).varint(c.checksums.len() as u64);
                for s in &c.checksums {
                    e.u32(*s);
                }
                e.varint(c.bad.len() as u64);
                for b in &c.bad {
                    e.u32(*b);
                }
            }
            BlockMessage::ChunkError { block, offset, reason } => {
                e.u8(T_ERROR).u64(*block).u64(*offset).bytes(reason.as_bytes());
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
        let u32s = |d: &mut Decoder<'_>| -> Result<Vec<u32>, DecodeError> {
            let n = d.len_prefix()?;
            (0..n).map(|_| d.u32()).collect()
        };
        let msg = match d.u8()? {
            T_GET_LOCATIONS => BlockMessage::GetBlockLocations { block: d.u64()? },
            T_LOCATIONS => BlockMessage::Locations {
                block: d.u64()?,
                len: d.u64()?,
                datanodes: u32s(&mut d)?.into_iter().map(|x| x as DatanodeId).collect(),
            },
            T_READ_BLOCK => BlockMessage::ReadBlock { block: d.u64()?, offset: d.u64()? },
            T_FETCH => BlockMessage::FetchChunk { block: d.u64()?, offset: d.u64()?, len: d.u32()? },
            T_REPLY => BlockMessage::ChunkReply(TransferChunk {
                block: d.u64()?,
                offset: d.u64()?,
                data: d.bytes()?.to_vec(),
                checksums: u32s(&mut d)?,
                bad: u32s(&mut d)?,
            }),
            T_ERROR => BlockMessage::ChunkError {
                block: d.u64()?,
                offset: d.u64()?,
                reason: String::from_utf8_lossy(d.bytes()?).into_owned(),
            },
            _ => return Err(err(5, "unknown message type")),
        };
        if !d.is_empty() {
            return Err(err(d.position(), "trailing bytes"));
        }
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_damage() {
        let msgs = vec![
            BlockMessage::GetBlockLocations { block: 9 },
            BlockMessage::Locations { block: 9, len: 100, datanodes: vec![2, 0, 1] },
            BlockMessage::ReadBlock { block: 9, offset: 65536 },
            BlockMessage::FetchChunk { block: 9, offset: 65536, len: 65536 },
            BlockMessage::ChunkReply(TransferChunk { block: 9, offset: 0, data: vec![7; 1000], checksums: vec![1, 2], bad: vec![1] }),
            BlockMessage::ChunkError { block: 9, offset: 0, reason: "gone".into() },
        ];
        for m in msgs {
            let f = m.encode();
            assert_eq!(BlockMessage::decode(&f).unwrap(), m);
            let mut g = f.clone();
            g[f.len() / 2] ^= 4;
            assert!(BlockMessage::decode(&g).is_err());
        }
    }
}
