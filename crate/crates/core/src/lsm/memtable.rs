use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::ops::Bound;

use super::record::{Kind, RangeTombstone, Record};

type Key = (Vec<u8>, Reverse<u64>);

#[derive(Debug, Default, Clone)]
pub(super) struct Memtable {
    map: BTreeMap<Key, (Kind, Vec<u8>)>,
    range_tombstones: Vec<RangeTombstone>,
    bytes: usize,
}

impl Memtable {
    pub fn is_empty(&self) -> bool {
        self.map.is_empty() && self.range_tombstones.is_empty()
    }

    pub fn approx_bytes(&self) -> usize {
        self.bytes
    }

    pub fn insert(&mut self, rec: Record) {
        self.bytes += rec.key.len() + rec.value.len() + 16;
        self.map.insert((rec.key, Reverse(rec.seq)), (rec.kind, rec.value));
    }

    pub fn add_range_tombstone(&mut self, rt: RangeTombstone) {
        self.bytes += rt.low.len() + rt.high.len() + 16;
        self.range_tombstones.push(rt);
    }

    pub fn range_tombstones(&self) -> &[RangeTombstone] {
        &self.range_tombstones
    }

    /// Newest version of `key` with a sequence below `bound`.
    pub fn get(&self, key: &[u8], bound: u64) -> Option<Record> {
        let start = (key.to_vec(), Reverse(bound.saturating_sub(1)));
        let ((k, Reverse(seq)), (kind, value)) = self.map.range(start..).next()?;
        (k.as_slice() == key && *seq < bound).then(|| Record { key: k.clone(), seq: *seq, kind: *kind, value: value.clone() })
    }

    /// All versions with keys in `[low, high)`, in internal order.
    pub fn range<'a>(&'a self, low: &[u8], high: Option<&'a [u8]>) -> impl Iterator<Item = Record> + 'a {
        let start: Key = (low.to_vec(), Reverse(u64::MAX));
        self.map
            .range((Bound::Included(start), Bound::Unbounded))
            .take_while(move |((k, _), _)| high.is_none_or(|h| k.as_slice() < h))
            .map(|((k, Reverse(seq)), (kind, value))| Record { key: k.clone(), seq: *seq, kind: *kind, value: value.clone() })
    }

    pub fn records(&self) -> Vec<Record> {
        self.range(&[], None).collect()
    }
}
