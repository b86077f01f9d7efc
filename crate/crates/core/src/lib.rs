//! Live recovery of bit corruptions in replicated storage.
//!
//! The crate bundles two desk-scale storage systems that recover from silent
//! bit corruption using the redundancy they already keep:
//!
//! - [`lsm`] and [`replication`]: an LSM key-value store whose SST files isolate
//!   corruption to single checksummed data blocks, replicated through a
//!   quorum log. Corrupted key ranges found during compaction are repaired by a
//!   patch that is serialized through the log, so the repaired replica always
//!   reflects a prefix of the log.
//! - [`blockfs`]: an immutable-block file store with 512 byte checksums that
//!   repairs 64 KiB transfer chunks from peer replicas during reads and falls
//!   back to bit-wise majority voting.
//!
//! Supporting modules:
//!
//! - [`error_model`]: closed-form and Monte Carlo probabilities of an
//!   application-visible read error under block- and chunk-level recovery.
//! - [`fault`]: a deterministic, seeded bit-flip injector over a storage
//!   environment, in flip-on-read and flip-at-rest modes.
//! - [`metafile`]: CRC-prefixed metadata files kept in several local copies.
//! - [`experiment`]: batch harness that drives the systems and writes CSV.
//!
//! Runnable walkthroughs for each capability live in `examples/`:
//!
//! ```bash
//! cargo run --release -p direct-store --example error_model_table
//! cargo run --release -p direct-store --example fault_injection
//! cargo run --release -p direct-store --example sst_corruption_ranges
//! cargo run --release -p direct-store --example metadata_duplication
//! cargo run --release -p direct-store --example kv_recovery
//! cargo run --release -p direct-store --example snapshot_invalidation
//! cargo run --release -p direct-store --example blockfs_repair
//! cargo run --release -p direct-store --example majority_vote
//! cargo run --release -p direct-store --example uber_tolerance
//! ```

pub mod blockfs;
pub mod checksum;
pub mod error_model;
pub mod experiment;
pub mod fault;
pub mod lsm;
pub mod metafile;
pub mod replication;
