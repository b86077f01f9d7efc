//! A single-leader, quorum-acknowledged shard group over LSM replicas, with
//! corruption recovery serialized through the log.
//!
//! A replica whose compaction hits a bad block reports the affected key
//! ranges to the leader, which logs a [`PatchRequest`] at index `t`. Every
//! healthy replica answers with the contents of those ranges after applying
//! the prefix `< t`; the corrupted replica stops applying at `t`, replaces
//! the ranges with the first verifying patch, and resumes.
//!
//! Everything runs inside a deterministic discrete-event simulation
//! ([`ShardGroup`]) with simulated time in microseconds.

mod group;
pub mod log;
mod replica;
pub mod wire;

use thiserror::Error;

use crate::lsm::{CorruptKeyRange, LsmError};

pub use group::{replay_prefix, Consistency, GroupConfig, ShardGroup};
pub use log::{seq_base, LogEntry, LogError, Payload, PatchRequest, ReplicaId, ReplicaLog};
pub use replica::{CompactTarget, CostModel, Micros, RecoveryRecord, Replica, ReplicaConfig, ReplicaEvent, ReplicaState, LEADER};
pub use wire::{Message, Patch};

#[derive(Debug, Error)]
pub enum ReadError {
    /// Retryable: the serving replica hit a bad block and has scheduled a
    /// compaction of the file.
    #[error("replica {replica}: {range}")]
    Corruption { replica: ReplicaId, range: CorruptKeyRange },
    #[error("replica {replica}: {source}")]
    Store {
        replica: ReplicaId,
        #[source]
        source: LsmError,
    },
    #[error("no replica reached index {index} within the timeout")]
    Timeout { index: u64 },
    #[error("no live replica can serve the read")]
    Unavailable,
}

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("entry {index} was not committed by a quorum within the timeout")]
    NoQuorum { index: u64 },
    #[error("the leader cannot accept writes")]
    LeaderUnavailable,
    #[error("replica {replica} failed to start: {reason}")]
    Startup { replica: ReplicaId, reason: String },
}
