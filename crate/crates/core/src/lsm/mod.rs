//! Local LSM key-value store with corruption-isolating SST files.
//!
//! Every data block carries its own CRC32, the index and properties blocks
//! are written twice inside each SST, and the manifest, current-pointer and
//! options files are kept in three copies. A checksum failure in a data
//! block never crashes a read or a compaction: it is converted into a
//! [`CorruptKeyRange`] bracketed by the surrounding index entries.

mod compaction;
mod memtable;
pub mod record;
pub mod sst;
mod store;

use std::io;

use thiserror::Error;

pub use compaction::CompactionReport;
pub use record::{successor, Kind, RangeTombstone, Record};
pub use sst::{BlockInfo, SstBuilder, SstReader};
pub use store::{FileInfo, Options, PatchStats, Snapshot, Store, WriteOp};

use crate::checksum::DecodeError;
use crate::metafile::MetaError;

/// Keys possibly lost to one corrupted data block: `[low, high)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct CorruptKeyRange {
    pub low: Vec<u8>,
    pub high: Vec<u8>,
    pub file_id: u64,
    pub block_offset: u64,
}

impl CorruptKeyRange {
    pub fn contains(&self, key: &[u8]) -> bool {
        self.low.as_slice() <= key && key < self.high.as_slice()
    }
}

impl std::fmt::Display for CorruptKeyRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "file {} block @{} keys [{}, {})",
            self.file_id,
            self.block_offset,
            self.low.escape_ascii(),
            self.high.escape_ascii()
        )
    }
}

#[derive(Debug, Error)]
pub enum LsmError {
    #[error("corrupted data block: {0}")]
    Corruption(CorruptKeyRange),
    #[error("both metadata copies of {file} are corrupt")]
    MetadataFatal { file: String },
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error("snapshot {0} was invalidated by a recovery")]
    SnapshotInvalidated(u64),
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(u64),
    #[error("store is closed")]
    Closed,
    #[error("memtable is empty")]
    EmptyMemtable,
    #[error("a compaction is already waiting to be installed")]
    CompactionPending,
    #[error("no pending compaction")]
    NoPendingCompaction,
    #[error("nothing to compact")]
    NothingToCompact,
    #[error("unknown file {0}")]
    UnknownFile(u64),
    #[error("sequence {got} is not above the last sequence {last}")]
    SequenceRegression { got: u64, last: u64 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("malformed file {file}: {source}")]
    Decode {
        file: String,
        #[source]
        source: DecodeError,
    },
    #[error("i/o on {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: io::Error,
    },
}

impl LsmError {
    pub fn io(file: &str, source: io::Error) -> Self {
        LsmError::Io { file: file.to_string(), source }
    }

    pub fn corrupt_range(&self) -> Option<&CorruptKeyRange> {
        match self {
            LsmError::Corruption(r) => Some(r),
            _ => None,
        }
    }
}

pub type Result<T, E = LsmError> = std::result::Result<T, E>;
