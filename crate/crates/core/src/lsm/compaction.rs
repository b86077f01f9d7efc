//! Version garbage collection for compaction outputs.

use std::sync::Arc;

use super::record::{RangeTombstone, Record};
use super::sst::SstReader;
use super::CorruptKeyRange;

/// Outcome of a compaction whose outputs are held back until installed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactionReport {
    pub inputs: Vec<u64>,
    pub outputs: Vec<u64>,
    pub output_level: usize,
    pub corrupt: Vec<CorruptKeyRange>,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub records_in: u64,
    pub records_out: u64,
}

#[derive(Debug)]
pub(super) struct PendingCompaction {
    pub report: CompactionReport,
    pub outputs: Vec<Arc<SstReader>>,
}

/// Merges the versions read from all inputs.
///
/// For every user key a version is kept if it is the newest one visible at
/// some read point: the present, or any live snapshot (versions below the
/// snapshot's sequence). A version hidden by a range tombstone at that read
/// point is not needed there. At the bottommost level, trailing point
/// deletes have nothing left to shadow and are dropped, and range tombstones
/// that cover no kept record are dropped.
pub(super) fn merge(
    mut records: Vec<Record>,
    range_tombstones: Vec<RangeTombstone>,
    snapshots: &[u64],
    bottommost: bool,
) -> (Vec<Record>, Vec<RangeTombstone>) {
    records.sort();
    records.dedup_by(|a, b| a.key == b.key && a.seq == b.seq);
    let mut rts = range_tombstones;
    rts.sort();
    rts.dedup();

    let mut bounds: Vec<u64> = snapshots.to_vec();
    bounds.sort_unstable();
    bounds.dedup();
    bounds.push(u64::MAX);

    let mut out = Vec::with_capacity(records.len());
    let mut start = 0;
    while start < records.len() {
        let end = start + records[start..].iter().take_while(|r| r.key == records[start].key).count();
        let versions = &records[start..end];
        let first_kept = out.len();
        // Versions are newest first, so visit read points newest first too.
        for &b in bounds.iter().rev() {
            let Some(v) = versions.iter().find(|v| v.seq < b) else { continue };
            if rts.iter().any(|rt| rt.seq < b && rt.covers(&v.key, v.seq)) {
                continue;
            }
            if out[first_kept..].iter().any(|k: &Record| k.seq == v.seq) {
                continue;
            }
            out.push(v.clone());
        }
        if bottommost {
            while out.len() > first_kept && out.last().is_some_and(Record::is_delete) {
                out.pop();
            }
        }
        start = end;
    }

    if bottommost {
        rts.retain(|rt| out.iter().any(|r| rt.covers(&r.key, r.seq)));
    }
    (out, rts)
}
