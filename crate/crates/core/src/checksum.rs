//! CRC32 (IEEE) and the small binary codec shared by the on-disk and wire
//! formats. All fixed-width integers are little-endian; variable-width
//! lengths are unsigned LEB128 varints.

use integer_encoding::VarInt;
use thiserror::Error;

pub fn crc32(data: &[u8]) -> u32 {
    crc32fast::hash(data)
}

pub fn verify(data: &[u8], expected: u32) -> bool {
    crc32(data) == expected
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte {offset}: {what}")]
pub struct DecodeError {
    pub offset: usize,
    pub what: &'static str,
}

/// Append-only encoder.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self { buf: Vec::with_capacity(cap) }
    }

    pub fn varint(&mut self, v: u64) -> &mut Self {
        let mut tmp = [0u8; 10];
        let n = v.encode_var(&mut tmp);
        self.buf.extend_from_slice(&tmp[..n]);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// Varint length followed by the bytes.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.varint(bytes.len() as u64);
        self.raw(bytes)
    }

    /// Appends the CRC32 of everything written so far.
    pub fn seal_crc(&mut self) -> &mut Self {
        let crc = crc32(&self.buf);
        self.u32(crc)
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice. Every read is bounds-checked so arbitrary
/// (corrupted) input yields an error rather than a panic.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    fn err(&self, what: &'static str) -> DecodeError {
        DecodeError { offset: self.pos, what }
    }

    pub fn varint(&mut self) -> Result<u64, DecodeError> {
        let (v, n) = u64::decode_var(&self.buf[self.pos..]).ok_or_else(|| self.err("bad varint"))?;
        self.pos += n;
        Ok(v)
    }

    /// A varint that must fit the remaining input when used as a length.
    pub fn len_prefix(&mut self) -> Result<usize, DecodeError> {
        let v = self.varint()?;
        if v > self.remaining() as u64 {
            return Err(self.err("length exceeds input"));
        }
        Ok(v as usize)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self.buf.get(self.pos).ok_or_else(|| self.err("truncated u8"))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        let raw = self.raw(4)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        let raw = self.raw(8)?;
        Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")))
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if n > self.remaining() {
            return Err(self.err("truncated input"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.len_prefix()?;
        self.raw(n)
    }
}

/// Splits `buf` into payload and trailing CRC32, returning the payload only if
/// the checksum verifies.
pub fn strip_crc(buf: &[u8]) -> Option<&[u8]> {
    if buf.len() < 4 {
        return None;
    }
    let (payload, tail) = buf.split_at(buf.len() - 4);
    let expected = u32::from_le_bytes(tail.try_into().ok()?);
    verify(payload, expected).then_some(payload)
}
