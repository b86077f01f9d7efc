//! Sorted string table files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! [data block 0] ... [data block n-1]
//! [zero pad to 4096] [meta copy A]
//! [zero pad to 4096] [meta copy B]
//! [footer A] [footer B]
//!
//! data block  = varint count, record * count, u32 crc
//! record      = varint keylen, key, u64 seq, u8 kind (0 delete, 1 put), varint vlen, value
//! meta copy   = index block, properties block
//! index block = varint n, (varint seplen, sep, u64 offset, u32 len) * n, u32 crc
//! properties  = varint len, smallest, varint len, largest, u64 min_seq, u64 max_seq,
//!               u64 entries, varint m, (varint len, low, varint len, high, u64 seq) * m, u32 crc
//! footer      = "DIRECTSS", u64 meta_a_offset, u32 meta_a_len, u64 meta_b_offset, u32 meta_b_len, u32 crc
//! ```
//!
//! Every CRC covers the bytes of its own block that precede it. The separator
//! of block i is its last user key, so block i holds exactly the keys in
//! `(sep[i-1], sep[i]]`. All versions of one user key stay in one block.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::checksum::{crc32, strip_crc, DecodeError, Decoder, Encoder};
use crate::fault::StorageEnv;

use super::record::{successor, RangeTombstone, Record};
use super::{CorruptKeyRange, LsmError, Result};

pub const MAGIC: &[u8; 8] = b"DIRECTSS";
pub const FOOTER_LEN: usize = 36;
pub const META_READ_ATTEMPTS: usize = 3;
pub const META_ALIGN: u64 = 4096;
pub const DEFAULT_BLOCK_CAPACITY: usize = 8 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub separator: Vec<u8>,
    pub offset: u64,
    pub len: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Properties {
    pub smallest: Vec<u8>,
    pub largest: Vec<u8>,
    pub min_seq: u64,
    pub max_seq: u64,
    pub entries: u64,
    pub range_tombstones: Vec<RangeTombstone>,
}

/// Ground truth about one data block, recorded while building.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    pub offset: u64,
    pub len: u32,
    pub records: Vec<Record>,
}

#[derive(Debug, Clone)]
pub struct BuiltSst {
    pub bytes: Vec<u8>,
    pub index: Vec<IndexEntry>,
    pub props: Properties,
    pub blocks: Vec<BlockInfo>,
    pub meta_offsets: [(u64, u32); 2],
}

#[derive(Debug)]
pub struct SstBuilder {
    capacity: usize,
    out: Vec<u8>,
    cur: Vec<Record>,
    cur_size: usize,
    index: Vec<IndexEntry>,
    props: Properties,
    blocks: Vec<BlockInfo>,
}

impl Default for SstBuilder {
    fn default() -> Self {
        Self::new(DEFAULT_BLOCK_CAPACITY)
    }
}

impl SstBuilder {
    pub fn new(block_capacity: usize) -> Self {
        Self {
            capacity: block_capacity.max(1),
            out: Vec::new(),
            cur: Vec::new(),
            cur_size: 0,
            index: Vec::new(),
            props: Properties { min_seq: u64::MAX, ..Properties::default() },
            blocks: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.props.entries == 0 && self.props.range_tombstones.is_empty()
    }

    pub fn entries(&self) -> u64 {
        self.props.entries
    }

    /// Approximate file size so far.
    pub fn estimated_len(&self) -> usize {
        self.out.len() + self.cur_size
    }

    /// Records must arrive in internal key order.
    pub fn add(&mut self, rec: Record) {
        if let Some(last) = self.cur.last().or_else(|| self.blocks.last().and_then(|b| b.records.last())) {
            debug_assert!(last < &rec, "records out of order");
        }
        let len = rec.encoded_len();
        let new_key = self.cur.last().is_some_and(|l| l.key != rec.key);
        if new_key && self.cur_size + len > self.capacity {
            self.finish_block();
        }
        if self.props.entries == 0 {
            self.props.smallest = rec.key.clone();
        }
        self.props.largest = rec.key.clone();
        self.props.entries += 1;
        self.props.min_seq = self.props.min_seq.min(rec.seq);
        self.props.max_seq = self.props.max_seq.max(rec.seq);
        self.cur_size += len;
        self.cur.push(rec);
    }

    pub fn add_range_tombstone(&mut self, rt: RangeTombstone) {
        self.props.max_seq = self.props.max_seq.max(rt.seq);
        self.props.min_seq = self.props.min_seq.min(rt.seq);
        self.props.range_tombstones.push(rt);
    }

    /// True when the next record would start a fresh key, so the file may be
    /// cut here without splitting a key's versions.
    pub fn at_key_boundary(&self, next_key: &[u8]) -> bool {
        self.cur.last().is_none_or(|l| l.key != next_key)
    }

    fn finish_block(&mut self) {
        if self.cur.is_empty() {
            return;
        }
        let records = std::mem::take(&mut self.cur);
        let mut e = Encoder::with_capacity(self.cur_size + 16);
        e.varint(records.len() as u64);
        for r in &records {
            r.encode_into(&mut e);
        }
        e.seal_crc();
        let block = e.finish();
        let offset = self.out.len() as u64;
        let len = block.len() as u32;
        self.out.extend_from_slice(&block);
        self.index.push(IndexEntry { separator: records.last().expect("non-empty").key.clone(), offset, len });
        self.blocks.push(BlockInfo { offset, len, records });
        self.cur_size = 0;
    }

    pub fn finish(mut self) -> BuiltSst {
        self.finish_block();
        if self.props.min_seq == u64::MAX {
            self.props.min_seq = 0;
        }
        let meta = encode_meta(&self.index, &self.props);
        let mut offsets = [(0u64, 0u32); 2];
        for slot in &mut offsets {
            let aligned = (self.out.len() as u64).next_multiple_of(META_ALIGN);
            self.out.resize(aligned as usize, 0);
            *slot = (aligned, meta.len() as u32);
            self.out.extend_from_slice(&meta);
        }
        let footer = encode_footer(offsets);
        self.out.extend_from_slice(&footer);
        self.out.extend_from_slice(&footer);
        BuiltSst { bytes: self.out, index: self.index, props: self.props, blocks: self.blocks, meta_offsets: offsets }
    }
}

fn encode_meta(index: &[IndexEntry], props: &Properties) -> Vec<u8> {
    let mut e = Encoder::new();
    e.varint(index.len() as u64);
    for ie in index {
        e.bytes(&ie.separator).u64(ie.offset).u32(ie.len);
    }
    e.seal_crc();
    let mut p = Encoder::new();
    p.bytes(&props.smallest).bytes(&props.largest).u64(props.min_seq).u64(props.max_seq).u64(props.entries);
    p.varint(props.range_tombstones.len() as u64);
    for rt in &props.range_tombstones {
        rt.encode_into(&mut p);
    }
    p.seal_crc();
    e.raw(p.as_slice());
    e.finish()
}

fn decode_meta(buf: &[u8]) -> Option<(Vec<IndexEntry>, Properties)> {
    let mut d = Decoder::new(buf);
    let n = d.varint().ok()?;
    let mut index = Vec::new();
    for _ in 0..n {
        index.push(IndexEntry { separator: d.bytes().ok()?.to_vec(), offset: d.u64().ok()?, len: d.u32().ok()? });
    }
    let index_end = d.position();
    if crc32(&buf[..index_end]) != d.u32().ok()? {
        return None;
    }
    let props_start = d.position();
    let smallest = d.bytes().ok()?.to_vec();
    let largest = d.bytes().ok()?.to_vec();
    let min_seq = d.u64().ok()?;
    let max_seq = d.u64().ok()?;
    let entries = d.u64().ok()?;
    let m = d.varint().ok()?;
    let mut range_tombstones = Vec::new();
    for _ in 0..m {
        range_tombstones.push(RangeTombstone::decode(&mut d).ok()?);
    }
    let props_end = d.position();
    if crc32(&buf[props_start..props_end]) != d.u32().ok()? || !d.is_empty() {
        return None;
    }
    Some((index, Properties { smallest, largest, min_seq, max_seq, entries, range_tombstones }))
}

fn encode_footer(meta: [(u64, u32); 2]) -> Vec<u8> {
    let mut e = Encoder::with_capacity(FOOTER_LEN);
    e.raw(MAGIC).u64(meta[0].0).u32(meta[0].1).u64(meta[1].0).u32(meta[1].1).seal_crc();
    e.finish()
}

fn decode_footer(buf: &[u8]) -> Option<[(u64, u32); 2]> {
    let payload = strip_crc(buf)?;
    let mut d = Decoder::new(payload);
    (d.raw(8).ok()? == MAGIC).then_some(())?;
    Some([(d.u64().ok()?, d.u32().ok()?), (d.u64().ok()?, d.u32().ok()?)])
}

pub fn decode_block(buf: &[u8]) -> std::result::Result<Vec<Record>, DecodeError> {
    let payload = strip_crc(buf).ok_or(DecodeError { offset: 0, what: "block checksum mismatch" })?;
    let mut d = Decoder::new(payload);
    let n = d.varint()?;
    let mut out = Vec::with_capacity(n.min(4096) as usize);
    for _ in 0..n {
        out.push(Record::decode(&mut d)?);
    }
    if !d.is_empty() {
        return Err(DecodeError { offset: d.position(), what: "trailing bytes in block" });
    }
    Ok(out)
}

/// An open, immutable SST. Index and properties are held in memory after a
/// verified read of either metadata copy.
#[derive(Debug)]
pub struct SstReader {
    id: u64,
    name: String,
    env: Arc<StorageEnv>,
    index: Vec<IndexEntry>,
    props: Properties,
    file_len: u64,
    meta_copies: [(u64, u32); 2],
    meta_fallbacks: u32,
    obsolete: AtomicBool,
}

impl SstReader {
    /// Opens a table. If every footer and metadata copy fails, the whole
    /// metadata read is retried a few times, since a read-path error may not
    /// be present in the stored bytes.
    pub fn open(env: Arc<StorageEnv>, name: &str, id: u64) -> Result<Self> {
        let mut attempt = 1;
        loop {
            match Self::open_once(env.clone(), name, id) {
                Err(LsmError::MetadataFatal { .. }) if attempt < META_READ_ATTEMPTS => attempt += 1,
                other => return other,
            }
        }
    }

    fn open_once(env: Arc<StorageEnv>, name: &str, id: u64) -> Result<Self> {
        let fatal = || LsmError::MetadataFatal { file: name.to_string() };
        let file_len = env.len(name).map_err(|e| LsmError::io(name, e))?;
        if file_len < 2 * FOOTER_LEN as u64 {
            return Err(fatal());
        }
        let tail = env.read_through(name, file_len - 2 * FOOTER_LEN as u64, 2 * FOOTER_LEN).map_err(|e| LsmError::io(name, e))?;
        let footers: Vec<_> = tail.chunks(FOOTER_LEN).filter_map(decode_footer).collect();
        let mut fallbacks = 0;
        let mut tried = Vec::new();
        let Some(&meta_copies) = footers.first() else { return Err(fatal()) };
        for meta in footers.iter().flatten() {
            if tried.contains(meta) {
                continue;
            }
            tried.push(*meta);
            let (off, len) = *meta;
            if off.checked_add(len as u64).is_none_or(|end| end > file_len) {
                fallbacks += 1;
                continue;
            }
            let buf = env.read_through(name, off, len as usize).map_err(|e| LsmError::io(name, e))?;
            match decode_meta(&buf) {
                Some((index, props)) => {
                    return Ok(Self {
                        id,
                        name: name.to_string(),
                        env,
                        index,
                        props,
                        file_len,
                        meta_copies,
                        meta_fallbacks: fallbacks,
                        obsolete: AtomicBool::new(false),
                    })
                }
                None => fallbacks += 1,
            }
        }
        Err(fatal())
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    pub fn props(&self) -> &Properties {
        &self.props
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    pub fn num_blocks(&self) -> usize {
        self.index.len()
    }

    /// How many metadata copies failed verification before one was used.
    /// `(offset, len)` of both metadata copies, as recorded in the footer.
    pub fn meta_copies(&self) -> [(u64, u32); 2] {
        self.meta_copies
    }

    pub fn meta_fallbacks(&self) -> u32 {
        self.meta_fallbacks
    }

    pub(crate) fn mark_obsolete(&self) {
        self.obsolete.store(true, Ordering::Relaxed);
    }

    pub fn may_contain(&self, key: &[u8]) -> bool {
        !self.index.is_empty() && self.props.smallest.as_slice() <= key && key <= self.props.largest.as_slice()
    }

    pub fn overlaps(&self, low: &[u8], high: &[u8]) -> bool {
        !self.index.is_empty() && self.props.smallest.as_slice() < high && low <= self.props.largest.as_slice()
    }

    /// The only block that can hold `key`.
    pub fn find_block(&self, key: &[u8]) -> Option<usize> {
        if !self.may_contain(key) {
            return None;
        }
        let i = self.index.partition_point(|e| e.separator.as_slice() < key);
        (i < self.index.len()).then_some(i)
    }

    /// Lower bound (inclusive) of the keys block `i` may hold.
    fn block_low(&self, i: usize) -> Vec<u8> {
        if i == 0 {
            self.props.smallest.clone()
        } else {
            successor(&self.index[i - 1].separator)
        }
    }

    /// The key range bracketed by the index entries around block `i`.
    pub fn block_range(&self, i: usize) -> CorruptKeyRange {
        CorruptKeyRange {
            low: self.block_low(i),
            high: successor(&self.index[i].separator),
            file_id: self.id,
            block_offset: self.index[i].offset,
        }
    }

    /// Blocks that may hold keys in `[low, high)`.
    pub fn blocks_overlapping(&self, low: &[u8], high: &[u8]) -> Range<usize> {
        if !self.overlaps(low, high) {
            return 0..0;
        }
        let start = self.index.partition_point(|e| e.separator.as_slice() < low);
        // Block i > 0 starts at successor(sep[i-1]).
        let end = self.index.partition_point(|e| successor(&e.separator).as_slice() < high);
        start..(end + 1).min(self.index.len()).max(start)
    }

    /// Reads and verifies block `i`.
    pub fn read_block(&self, i: usize) -> Result<Vec<Record>> {
        let ie = &self.index[i];
        let buf = self.env.read_through(&self.name, ie.offset, ie.len as usize).map_err(|e| LsmError::io(&self.name, e))?;
        decode_block(&buf).map_err(|_| LsmError::Corruption(self.block_range(i)))
    }

    /// Every record in the file, or the ranges of the blocks that failed.
    pub fn scan_all(&self) -> (Vec<Record>, Vec<CorruptKeyRange>) {
        let mut recs = Vec::new();
        let mut bad = Vec::new();
        for i in 0..self.num_blocks() {
            match self.read_block(i) {
                Ok(r) => recs.extend(r),
                Err(_) => bad.push(self.block_range(i)),
            }
        }
        (recs, bad)
    }
}

impl Drop for SstReader {
    fn drop(&mut self) {
        if self.obsolete.load(Ordering::Relaxed) {
            let _ = self.env.delete(&self.name);
        }
    }
}
