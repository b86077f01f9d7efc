use std::cmp::Ordering;

use crate::checksum::{DecodeError, Decoder, Encoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum Kind {
    Delete = 0,
    Put = 1,
}

impl Kind {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(Kind::Delete),
            1 => Some(Kind::Put),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub key: Vec<u8>,
    pub seq: u64,
    pub kind: Kind,
    pub value: Vec<u8>,
}

impl Record {
    pub fn put(key: impl Into<Vec<u8>>, seq: u64, value: impl Into<Vec<u8>>) -> Self {
        Self { key: key.into(), seq, kind: Kind::Put, value: value.into() }
    }

    pub fn delete(key: impl Into<Vec<u8>>, seq: u64) -> Self {
        Self { key: key.into(), seq, kind: Kind::Delete, value: Vec::new() }
    }

    pub fn is_delete(&self) -> bool {
        self.kind == Kind::Delete
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        e.bytes(&self.key).u64(self.seq).u8(self.kind as u8).bytes(&self.value);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let key = d.bytes()?.to_vec();
        let seq = d.u64()?;
        let pos = d.position();
        let kind = Kind::from_u8(d.u8()?).ok_or(DecodeError { offset: pos, what: "bad record kind" })?;
        let value = d.bytes()?.to_vec();
        Ok(Self { key, seq, kind, value })
    }

    pub fn encoded_len(&self) -> usize {
        let mut e = Encoder::new();
        self.encode_into(&mut e);
        e.len()
    }
}

/// Internal key order: user key ascending, then sequence descending.
pub fn internal_cmp(a_key: &[u8], a_seq: u64, b_key: &[u8], b_seq: u64) -> Ordering {
    a_key.cmp(b_key).then(b_seq.cmp(&a_seq))
}

impl Ord for Record {
    fn cmp(&self, other: &Self) -> Ordering {
        internal_cmp(&self.key, self.seq, &other.key, other.seq)
    }
}

impl PartialOrd for Record {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Smallest key strictly greater than `key`.
pub fn successor(key: &[u8]) -> Vec<u8> {
    let mut k = Vec::with_capacity(key.len() + 1);
    k.extend_from_slice(key);
    k.push(0);
    k
}

/// Deletes every version of keys in `[low, high)` with a sequence below `seq`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct RangeTombstone {
    pub low: Vec<u8>,
    pub high: Vec<u8>,
    pub seq: u64,
}

impl RangeTombstone {
    pub fn covers(&self, key: &[u8], seq: u64) -> bool {
        seq < self.seq && self.contains(key)
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.low.as_slice() <= key && key < self.high.as_slice()
    }

    pub fn overlaps(&self, low: &[u8], high: &[u8]) -> bool {
        self.low.as_slice() < high && low < self.high.as_slice()
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        e.bytes(&self.low).bytes(&self.high).u64(self.seq);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self { low: d.bytes()?.to_vec(), high: d.bytes()?.to_vec(), seq: d.u64()? })
    }
}
