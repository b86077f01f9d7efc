use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};

use crate::fault::StorageEnv;
use crate::metafile::MetaFiles;

use super::compaction::{merge, CompactionReport, PendingCompaction};
use super::memtable::Memtable;
use super::record::{Kind, RangeTombstone, Record};
use super::sst::{SstBuilder, SstReader, DEFAULT_BLOCK_CAPACITY};
use super::{CorruptKeyRange, LsmError, Result};

pub const NUM_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Options {
    pub block_capacity: usize,
    /// Memtable size that triggers an automatic flush after a write.
    pub memtable_bytes: usize,
    /// Compaction outputs are cut near this size.
    pub target_file_bytes: usize,
    pub l0_compaction_trigger: usize,
    pub l1_compaction_bytes: u64,
    pub meta_copies: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            block_capacity: DEFAULT_BLOCK_CAPACITY,
            memtable_bytes: 256 * 1024,
            target_file_bytes: 512 * 1024,
            l0_compaction_trigger: 4,
            l1_compaction_bytes: 4 * 1024 * 1024,
            meta_copies: crate::metafile::DEFAULT_COPIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteOp {
    Put(Vec<u8>, Vec<u8>),
    Delete(Vec<u8>),
}

impl WriteOp {
    pub fn key(&self) -> &[u8] {
        match self {
            WriteOp::Put(k, _) | WriteOp::Delete(k) => k,
        }
    }

    fn into_record(self, seq: u64) -> Record {
        match self {
            WriteOp::Put(k, v) => Record::put(k, seq, v),
            WriteOp::Delete(k) => Record::delete(k, seq),
        }
    }
}

/// A consistent read point: sees every version with a sequence below `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Snapshot {
    pub id: u64,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileInfo {
    pub id: u64,
    pub level: usize,
    pub bytes: u64,
    pub entries: u64,
    pub blocks: usize,
    pub smallest: Vec<u8>,
    pub largest: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PatchStats {
    pub ranges: usize,
    pub records: usize,
    pub invalidated_snapshots: usize,
    pub installed_compaction: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    next_file_id: u64,
    durable_seq: u64,
    levels: Vec<Vec<u64>>,
}

#[derive(Debug, Default)]
struct Inner {
    mem: Memtable,
    /// L0 newest first; L1 and L2 sorted by key, non-overlapping.
    levels: [Vec<Arc<SstReader>>; NUM_LEVELS],
    last_seq: u64,
    durable_seq: u64,
    next_file_id: u64,
    manifest_no: u64,
    snapshots: BTreeMap<u64, u64>,
    invalidated: HashSet<u64>,
    next_snapshot: u64,
    compacting: bool,
    pending: Option<PendingCompaction>,
    closed: bool,
}

impl Inner {
    fn files(&self) -> impl Iterator<Item = (usize, &Arc<SstReader>)> {
        self.levels.iter().enumerate().flat_map(|(l, fs)| fs.iter().map(move |f| (l, f)))
    }

    fn live_snapshot_seqs(&self) -> Vec<u64> {
        self.snapshots.values().copied().collect()
    }

    fn bound(&self, snapshot: Option<&Snapshot>) -> Result<u64> {
        match snapshot {
            None => Ok(u64::MAX),
            Some(s) if self.invalidated.contains(&s.id) => Err(LsmError::SnapshotInvalidated(s.id)),
            Some(s) if self.snapshots.contains_key(&s.id) => Ok(s.seq),
            Some(s) => Err(LsmError::UnknownSnapshot(s.id)),
        }
    }

    fn range_tombstones(&self) -> impl Iterator<Item = &RangeTombstone> {
        self.mem.range_tombstones().iter().chain(self.files().flat_map(|(_, f)| f.props().range_tombstones.iter()))
    }
}

/// A single-writer LSM store rooted at a directory of a [`StorageEnv`].
#[derive(Debug)]
pub struct Store {
    dir: String,
    env: Arc<StorageEnv>,
    meta: MetaFiles,
    opts: Options,
    inner: RwLock<Inner>,
    /// Serializes manifest rewrites.
    manifest_lock: Mutex<()>,
}

impl Store {
    /// Opens the store in `dir`, creating it if no CURRENT file exists.
    pub fn open(env: Arc<StorageEnv>, dir: &str, opts: Options) -> Result<Self> {
        let meta = MetaFiles::with_copies(env.clone(), opts.meta_copies);
        let store = Self {
            dir: dir.trim_end_matches('/').to_string(),
            env,
            meta,
            opts,
            inner: RwLock::new(Inner { next_file_id: 1, ..Inner::default() }),
            manifest_lock: Mutex::new(()),
        };
        if store.meta.exists(&store.path("CURRENT")) {
            store.recover()?;
        } else {
            let options = serde_json::to_vec(&store.opts).expect("options serialize");
            store.meta.write(&store.path("OPTIONS"), &options)?;
            let mut inner = store.write_inner()?;
            store.write_manifest(&mut inner)?;
        }
        Ok(store)
    }

    fn recover(&self) -> Result<()> {
        let current = self.meta.read(&self.path("CURRENT"))?;
        let manifest_name = String::from_utf8(current).map_err(|_| LsmError::Manifest("CURRENT is not utf-8".into()))?;
        let manifest_no = manifest_name
            .strip_prefix("MANIFEST-")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| LsmError::Manifest(format!("bad manifest name {manifest_name}")))?;
        let raw = self.meta.read(&self.path(&manifest_name))?;
        let m: Manifest = serde_json::from_slice(&raw).map_err(|e| LsmError::Manifest(e.to_string()))?;
        if m.levels.len() != NUM_LEVELS {
            return Err(LsmError::Manifest(format!("expected {NUM_LEVELS} levels")));
        }
        // OPTIONS is read to surface corruption; the caller's options win.
        self.meta.read(&self.path("OPTIONS"))?;
        let mut inner = self.inner.write().unwrap();
        for (level, ids) in m.levels.iter().enumerate() {
            for &id in ids {
                let reader = SstReader::open(self.env.clone(), &self.sst_name(id), id)?;
                inner.levels[level].push(Arc::new(reader));
            }
        }
        inner.next_file_id = m.next_file_id;
        inner.durable_seq = m.durable_seq;
        inner.last_seq = m.durable_seq;
        inner.manifest_no = manifest_no;
        Ok(())
    }

    fn path(&self, name: &str) -> String {
        format!("{}/{}", self.dir, name)
    }

    pub fn sst_name(&self, id: u64) -> String {
        self.path(&format!("{id:06}.sst"))
    }

    pub fn dir(&self) -> &str {
        &self.dir
    }

    pub fn env(&self) -> &Arc<StorageEnv> {
        &self.env
    }

    pub fn options(&self) -> &Options {
        &self.opts
    }

    /// Names of the metadata files (every copy) the store keeps.
    pub fn metadata_files(&self) -> Vec<String> {
        let inner = self.inner.read().unwrap();
        let mut out = Vec::new();
        for name in ["CURRENT".to_string(), "OPTIONS".to_string(), format!("MANIFEST-{:06}", inner.manifest_no)] {
            out.extend(self.meta.copy_names(&self.path(&name)));
        }
        out
    }

    fn read_inner(&self) -> Result<RwLockReadGuard<'_, Inner>> {
        let g = self.inner.read().unwrap();
        if g.closed {
            return Err(LsmError::Closed);
        }
        Ok(g)
    }

    fn write_inner(&self) -> Result<RwLockWriteGuard<'_, Inner>> {
        let g = self.inner.write().unwrap();
        if g.closed {
            return Err(LsmError::Closed);
        }
        Ok(g)
    }

    fn write_manifest(&self, inner: &mut Inner) -> Result<()> {
        let _guard = self.manifest_lock.lock().unwrap();
        let m = Manifest {
            next_file_id: inner.next_file_id,
            durable_seq: inner.durable_seq,
            levels: inner.levels.iter().map(|fs| fs.iter().map(|f| f.id()).collect()).collect(),
        };
        let no = inner.manifest_no + 1;
        let name = format!("MANIFEST-{no:06}");
        self.meta.write(&self.path(&name), &serde_json::to_vec(&m).expect("manifest serializes"))?;
        self.meta.write(&self.path("CURRENT"), name.as_bytes())?;
        if inner.manifest_no > 0 {
            self.meta.delete(&self.path(&format!("MANIFEST-{:06}", inner.manifest_no)));
        }
        inner.manifest_no = no;
        Ok(())
    }

    pub fn close(&self) {
        self.inner.write().unwrap().closed = true;
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.read().unwrap().last_seq
    }

    /// Highest sequence that survives a reopen.
    pub fn durable_seq(&self) -> u64 {
        self.inner.read().unwrap().durable_seq
    }

    fn check_seq(inner: &Inner, seq: u64) -> Result<()> {
        if seq <= inner.last_seq {
            return Err(LsmError::SequenceRegression { got: seq, last: inner.last_seq });
        }
        Ok(())
    }

    fn after_write(&self, mut inner: RwLockWriteGuard<'_, Inner>) -> Result<()> {
        if inner.mem.approx_bytes() >= self.opts.memtable_bytes {
            self.flush_locked(&mut inner)?;
        }
        Ok(())
    }

    pub fn put(&self, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Result<u64> {
        let mut inner = self.write_inner()?;
        let seq = inner.last_seq + 1;
        inner.mem.insert(Record::put(key, seq, value));
        inner.last_seq = seq;
        self.after_write(inner)?;
        Ok(seq)
    }

    pub fn delete(&self, key: impl Into<Vec<u8>>) -> Result<u64> {
        let mut inner = self.write_inner()?;
        let seq = inner.last_seq + 1;
        inner.mem.insert(Record::delete(key, seq));
        inner.last_seq = seq;
        self.after_write(inner)?;
        Ok(seq)
    }

    /// Deletes every key in `[low, high)`.
    pub fn delete_range(&self, low: impl Into<Vec<u8>>, high: impl Into<Vec<u8>>) -> Result<u64> {
        let mut inner = self.write_inner()?;
        let seq = inner.last_seq + 1;
        inner.mem.add_range_tombstone(RangeTombstone { low: low.into(), high: high.into(), seq });
        inner.last_seq = seq;
        self.after_write(inner)?;
        Ok(seq)
    }

    /// Applies `ops` in order with sequences `seq_base`, `seq_base + 1`, ...
    pub fn write_batch(&self, seq_base: u64, ops: Vec<WriteOp>) -> Result<()> {
        let mut inner = self.write_inner()?;
        Self::check_seq(&inner, seq_base)?;
        let n = ops.len() as u64;
        for (i, op) in ops.into_iter().enumerate() {
            inner.mem.insert(op.into_record(seq_base + i as u64));
        }
        inner.last_seq = seq_base + n.saturating_sub(1);
        self.after_write(inner)
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        self.get_inner(key, None)
    }

    pub fn get_at(&self, key: &[u8], snapshot: &Snapshot) -> Result<Option<Vec<u8>>> {
        self.get_inner(key, Some(snapshot))
    }

    fn get_inner(&self, key: &[u8], snapshot: Option<&Snapshot>) -> Result<Option<Vec<u8>>> {
        let inner = self.read_inner()?;
        let bound = inner.bound(snapshot)?;
        let mut best = inner.mem.get(key, bound);
        let rt_seq = inner
            .range_tombstones()
            .filter(|rt| rt.seq < bound && rt.contains(key))
            .map(|rt| rt.seq)
            .max()
            .unwrap_or(0);
        for (_, file) in inner.files() {
            let floor = best.as_ref().map_or(0, |b| b.seq).max(rt_seq);
            if file.props().max_seq < floor {
                continue;
            }
            let Some(i) = file.find_block(key) else { continue };
            let block = file.read_block(i)?;
            if let Some(v) = block.into_iter().find(|r| r.key == key && r.seq < bound) {
                if best.as_ref().is_none_or(|b| v.seq > b.seq) {
                    best = Some(v);
                }
            }
        }
        Ok(best.filter(|b| b.kind == Kind::Put && b.seq > rt_seq).map(|b| b.value))
    }

    /// Newest live value of every key in `[low, high)`; deleted keys are
    /// omitted. Any corrupted block that may hold keys in the range fails
    /// the whole scan.
    pub fn scan_range(&self, low: &[u8], high: &[u8]) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.scan_inner(low, Some(high), None)
    }

    pub fn scan_range_at(&self, low: &[u8], high: &[u8], snapshot: &Snapshot) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.scan_inner(low, Some(high), Some(snapshot))
    }

    /// Every live key-value pair.
    pub fn scan_all(&self) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.scan_inner(&[], None, None)
    }

    fn scan_inner(&self, low: &[u8], high: Option<&[u8]>, snapshot: Option<&Snapshot>) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let inner = self.read_inner()?;
        let bound = inner.bound(snapshot)?;
        let in_range = |k: &[u8]| low <= k && high.is_none_or(|h| k < h);
        let mut newest: BTreeMap<Vec<u8>, Record> = BTreeMap::new();
        let mut offer = |r: Record| {
            if r.seq < bound && in_range(&r.key) {
                match newest.get(&r.key) {
                    Some(cur) if cur.seq >= r.seq => {}
                    _ => {
                        newest.insert(r.key.clone(), r);
                    }
                }
            }
        };
        inner.mem.range(low, high).for_each(&mut offer);
        for (_, file) in inner.files() {
            let span = match high {
                Some(h) => file.blocks_overlapping(low, h),
                None if file.num_blocks() == 0 || file.props().largest.as_slice() < low => 0..0,
                None => file.index().partition_point(|e| e.separator.as_slice() < low)..file.num_blocks(),
            };
            for i in span {
                file.read_block(i)?.into_iter().for_each(&mut offer);
            }
        }
        let rts: Vec<&RangeTombstone> = inner.range_tombstones().filter(|rt| rt.seq < bound).collect();
        Ok(newest
            .into_values()
            .filter(|r| r.kind == Kind::Put && !rts.iter().any(|rt| rt.covers(&r.key, r.seq)))
            .map(|r| (r.key, r.value))
            .collect())
    }

    pub fn flush(&self) -> Result<FileInfo> {
        let mut inner = self.write_inner()?;
        self.flush_locked(&mut inner)
    }

    fn alloc_file_id(inner: &mut Inner) -> u64 {
        let id = inner.next_file_id;
        inner.next_file_id += 1;
        id
    }

    fn write_sst(&self, id: u64, builder: SstBuilder) -> Result<Arc<SstReader>> {
        let built = builder.finish();
        let name = self.sst_name(id);
        self.env.write(&name, &built.bytes).map_err(|e| LsmError::io(&name, e))?;
        // Reopen from the stored bytes so a bad write is caught before the
        // file becomes visible.
        let reader = SstReader::open(self.env.clone(), &name, id).inspect_err(|_| {
            let _ = self.env.delete(&name);
        })?;
        Ok(Arc::new(reader))
    }

    fn flush_locked(&self, inner: &mut Inner) -> Result<FileInfo> {
        if inner.mem.is_empty() {
            return Err(LsmError::EmptyMemtable);
        }
        let mut builder = SstBuilder::new(self.opts.block_capacity);
        for r in inner.mem.records() {
            builder.add(r);
        }
        for rt in inner.mem.range_tombstones() {
            builder.add_range_tombstone(rt.clone());
        }
        let id = inner.next_file_id;
        let reader = self.write_sst(id, builder)?;
        let prev_durable = inner.durable_seq;
        inner.next_file_id += 1;
        inner.levels[0].insert(0, reader.clone());
        inner.durable_seq = inner.last_seq;
        if let Err(e) = self.write_manifest(inner) {
            inner.levels[0].remove(0);
            inner.durable_seq = prev_durable;
            reader.mark_obsolete();
            return Err(e);
        }
        inner.mem = Memtable::default();
        Ok(file_info(0, &reader))
    }

    pub fn files(&self) -> Vec<FileInfo> {
        let inner = self.inner.read().unwrap();
        inner.files().map(|(l, f)| file_info(l, f)).collect()
    }

    pub fn file(&self, id: u64) -> Option<Arc<SstReader>> {
        let inner = self.inner.read().unwrap();
        let found = inner.files().find(|(_, f)| f.id() == id).map(|(_, f)| f.clone());
        found
    }

    /// Bytes of all live SST files.
    pub fn total_bytes(&self) -> u64 {
        self.files().iter().map(|f| f.bytes).sum()
    }

    pub fn level_bytes(&self, level: usize) -> u64 {
        self.files().iter().filter(|f| f.level == level).map(|f| f.bytes).sum()
    }

    /// Data blocks of live files that may hold keys in `[low, high)`.
    pub fn blocks_overlapping(&self, low: &[u8], high: &[u8]) -> usize {
        let inner = self.inner.read().unwrap();
        let n = inner.files().map(|(_, f)| f.blocks_overlapping(low, high).len()).sum();
        n
    }

    /// Names of the files a [`Store::compact_level`] of `level` would read.
    pub fn compaction_inputs(&self, level: usize) -> Vec<String> {
        let inner = self.inner.read().unwrap();
        let levels: &[usize] = match level {
            0 => &[0, 1],
            1 => &[1, 2],
            _ => &[],
        };
        let names = levels.iter().flat_map(|&l| inner.levels[l].iter().map(|f| f.name().to_string())).collect();
        names
    }

    pub fn memtable_bytes(&self) -> usize {
        self.inner.read().unwrap().mem.approx_bytes()
    }

    pub fn has_pending_compaction(&self) -> bool {
        let inner = self.inner.read().unwrap();
        inner.pending.is_some() || inner.compacting
    }

    pub fn pending_compaction(&self) -> Option<CompactionReport> {
        self.inner.read().unwrap().pending.as_ref().map(|p| p.report.clone())
    }

    /// Picks a compaction if the shape of the tree calls for one.
    pub fn needs_compaction(&self) -> Option<usize> {
        let inner = self.inner.read().unwrap();
        if inner.pending.is_some() || inner.compacting {
            return None;
        }
        if inner.levels[0].len() >= self.opts.l0_compaction_trigger {
            return Some(0);
        }
        let l1: u64 = inner.levels[1].iter().map(|f| f.file_len()).sum();
        (l1 >= self.opts.l1_compaction_bytes).then_some(1)
    }

    /// Compacts level `level` into the next one: all of L0 with all of L1,
    /// or all of L1 with all of L2. Outputs are held until [`Store::install_pending`].
    pub fn compact_level(&self, level: usize) -> Result<CompactionReport> {
        let (inputs, output_level, bottommost) = {
            let inner = self.write_inner()?;
            match level {
                0 => {
                    let inputs: Vec<_> = inner.levels[0].iter().chain(inner.levels[1].iter()).cloned().collect();
                    (inputs, 1, inner.levels[2].is_empty())
                }
                1 => (inner.levels[1].iter().chain(inner.levels[2].iter()).cloned().collect(), 2, true),
                _ => return Err(LsmError::NothingToCompact),
            }
        };
        self.run_compaction(inputs, output_level, bottommost)
    }

    /// Compaction that rewrites the given file, used after a read hits a
    /// corrupted block in it.
    pub fn compact_file(&self, id: u64) -> Result<CompactionReport> {
        let (level, file) = {
            let inner = self.read_inner()?;
            let (l, f) = inner.files().find(|(_, f)| f.id() == id).ok_or(LsmError::UnknownFile(id))?;
            (l, f.clone())
        };
        match level {
            0 | 1 => self.compact_level(level),
            _ => self.run_compaction(vec![file], 2, true),
        }
    }

    fn run_compaction(&self, inputs: Vec<Arc<SstReader>>, output_level: usize, bottommost: bool) -> Result<CompactionReport> {
        if inputs.is_empty() {
            return Err(LsmError::NothingToCompact);
        }
        let snapshots = {
            let mut inner = self.write_inner()?;
            if inner.pending.is_some() || inner.compacting {
                return Err(LsmError::CompactionPending);
            }
            inner.compacting = true;
            inner.live_snapshot_seqs()
        };
        let result = self.compact_inputs(&inputs, output_level, bottommost, &snapshots);
        let mut inner = self.inner.write().unwrap();
        inner.compacting = false;
        let pending = result?;
        let report = pending.report.clone();
        inner.pending = Some(pending);
        Ok(report)
    }

    fn compact_inputs(
        &self,
        inputs: &[Arc<SstReader>],
        output_level: usize,
        bottommost: bool,
        snapshots: &[u64],
    ) -> Result<PendingCompaction> {
        let mut records = Vec::new();
        let mut rts = Vec::new();
        let mut corrupt = Vec::new();
        let mut bytes_read = 0;
        for file in inputs {
            for i in 0..file.num_blocks() {
                bytes_read += file.index()[i].len as u64;
                match file.read_block(i) {
                    Ok(recs) => records.extend(recs),
                    Err(LsmError::Corruption(range)) => corrupt.push(range),
                    Err(e) => return Err(e),
                }
            }
            rts.extend(file.props().range_tombstones.iter().cloned());
        }
        let records_in = records.len() as u64;
        let (kept, kept_rts) = merge(records, rts, snapshots, bottommost);
        let records_out = kept.len() as u64;

        let mut outputs: Vec<Arc<SstReader>> = Vec::new();
        let discard = |outputs: &[Arc<SstReader>]| outputs.iter().for_each(|o| o.mark_obsolete());
        let mut builder = SstBuilder::new(self.opts.block_capacity);
        let mut rts_iter = Some(kept_rts);
        for r in kept {
            if builder.entries() > 0 && builder.estimated_len() >= self.opts.target_file_bytes && builder.at_key_boundary(&r.key) {
                let full = std::mem::replace(&mut builder, SstBuilder::new(self.opts.block_capacity));
                let id = Self::alloc_file_id(&mut self.inner.write().unwrap());
                match self.write_sst(id, full) {
                    Ok(o) => outputs.push(o),
                    Err(e) => {
                        discard(&outputs);
                        return Err(e);
                    }
                }
            }
            if let Some(rts) = rts_iter.take() {
                rts.into_iter().for_each(|rt| builder.add_range_tombstone(rt));
            }
            builder.add(r);
        }
        if let Some(rts) = rts_iter.take() {
            rts.into_iter().for_each(|rt| builder.add_range_tombstone(rt));
        }
        if !builder.is_empty() {
            let id = Self::alloc_file_id(&mut self.inner.write().unwrap());
            match self.write_sst(id, builder) {
                Ok(o) => outputs.push(o),
                Err(e) => {
                    discard(&outputs);
                    return Err(e);
                }
            }
        }
        let report = CompactionReport {
            inputs: inputs.iter().map(|f| f.id()).collect(),
            outputs: outputs.iter().map(|f| f.id()).collect(),
            output_level,
            corrupt,
            bytes_read,
            bytes_written: outputs.iter().map(|f| f.file_len()).sum(),
            records_in,
            records_out,
        };
        Ok(PendingCompaction { report, outputs })
    }

    fn install_locked(&self, inner: &mut Inner) -> Result<bool> {
        let Some(pending) = inner.pending.take() else { return Ok(false) };
        let inputs: HashSet<u64> = pending.report.inputs.iter().copied().collect();
        let before = inner.levels.clone();
        for level in inner.levels.iter_mut() {
            level.retain(|f| !inputs.contains(&f.id()));
        }
        let out_level = pending.report.output_level;
        inner.levels[out_level].extend(pending.outputs.iter().cloned());
        if out_level > 0 {
            inner.levels[out_level].sort_by(|a, b| a.props().smallest.cmp(&b.props().smallest));
        }
        if let Err(e) = self.write_manifest(inner) {
            inner.levels = before;
            inner.pending = Some(pending);
            return Err(e);
        }
        for (_, f) in before.iter().enumerate().flat_map(|(l, fs)| fs.iter().map(move |f| (l, f))) {
            if inputs.contains(&f.id()) {
                f.mark_obsolete();
            }
        }
        Ok(true)
    }

    /// Makes the held compaction outputs visible and retires its inputs.
    pub fn install_pending(&self) -> Result<CompactionReport> {
        let mut inner = self.write_inner()?;
        let report = inner.pending.as_ref().map(|p| p.report.clone()).ok_or(LsmError::NoPendingCompaction)?;
        self.install_locked(&mut inner)?;
        Ok(report)
    }

    /// Drops the held compaction; its inputs stay live.
    pub fn discard_pending(&self) -> Option<CompactionReport> {
        let mut inner = self.inner.write().unwrap();
        let pending = inner.pending.take()?;
        pending.outputs.iter().for_each(|o| o.mark_obsolete());
        Some(pending.report)
    }

    /// Replaces the contents of `ranges` with `patch` as one atomic step.
    ///
    /// Every key in the ranges is deleted by a range tombstone at `seq_base`,
    /// then the patch pairs are written at `seq_base + 1 ...` in key order. A
    /// held compaction is installed in the same step, all snapshots are
    /// invalidated, and the result is flushed.
    pub fn apply_patch(&self, seq_base: u64, ranges: &[CorruptKeyRange], patch: &[(Vec<u8>, Vec<u8>)]) -> Result<PatchStats> {
        let mut inner = self.write_inner()?;
        Self::check_seq(&inner, seq_base)?;
        let installed_compaction = self.install_locked(&mut inner)?;
        for r in ranges {
            inner.mem.add_range_tombstone(RangeTombstone { low: r.low.clone(), high: r.high.clone(), seq: seq_base });
        }
        let mut sorted: Vec<_> = patch.iter().filter(|(k, _)| ranges.iter().any(|r| r.contains(k))).collect();
        sorted.sort();
        sorted.dedup_by(|a, b| a.0 == b.0);
        for (i, (k, v)) in sorted.iter().enumerate() {
            inner.mem.insert(Record::put(k.clone(), seq_base + 1 + i as u64, v.clone()));
        }
        inner.last_seq = seq_base + sorted.len() as u64;
        let invalidated_snapshots = Self::invalidate_locked(&mut inner);
        self.flush_locked(&mut inner)?;
        Ok(PatchStats { ranges: ranges.len(), records: sorted.len(), invalidated_snapshots, installed_compaction })
    }

    pub fn take_snapshot(&self) -> Result<Snapshot> {
        let mut inner = self.write_inner()?;
        let id = inner.next_snapshot;
        inner.next_snapshot += 1;
        let seq = inner.last_seq + 1;
        inner.snapshots.insert(id, seq);
        Ok(Snapshot { id, seq })
    }

    pub fn release_snapshot(&self, snapshot: &Snapshot) {
        let mut inner = self.inner.write().unwrap();
        inner.snapshots.remove(&snapshot.id);
        inner.invalidated.remove(&snapshot.id);
    }

    pub fn snapshot_valid(&self, snapshot: &Snapshot) -> bool {
        self.inner.read().unwrap().snapshots.contains_key(&snapshot.id)
    }

    pub fn live_snapshots(&self) -> usize {
        self.inner.read().unwrap().snapshots.len()
    }

    fn invalidate_locked(inner: &mut Inner) -> usize {
        let ids: Vec<u64> = inner.snapshots.keys().copied().collect();
        inner.snapshots.clear();
        inner.invalidated.extend(ids.iter().copied());
        ids.len()
    }

    /// Invalidates every live snapshot; reads through them then fail.
    pub fn invalidate_all_snapshots(&self) -> usize {
        Self::invalidate_locked(&mut self.inner.write().unwrap())
    }
}

fn file_info(level: usize, f: &SstReader) -> FileInfo {
    FileInfo {
        id: f.id(),
        level,
        bytes: f.file_len(),
        entries: f.props().entries,
        blocks: f.num_blocks(),
        smallest: f.props().smallest.clone(),
        largest: f.props().largest.clone(),
    }
}
