//! One member of a shard group: a log, an LSM store, and the recovery
//! state machine.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use crate::fault::{InjectionMode, StorageEnv};
use crate::lsm::{CorruptKeyRange, LsmError, Options, PatchStats, Store};

use super::log::{seq_base, LogEntry, Payload, PatchRequest, ReplicaId, ReplicaLog};
use super::wire::{Message, Patch};

/// Simulated time in microseconds.
pub type Micros = u64;

/// Work-based timing used to charge simulated time for recovery steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostModel {
    pub base_latency_us: Micros,
    pub jitter_us: Micros,
    pub net_byte_ns: u64,
    pub block_read_us: Micros,
    pub disk_byte_ns: u64,
    pub patch_apply_base_us: Micros,
    pub record_apply_us: Micros,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            base_latency_us: 500,
            jitter_us: 300,
            net_byte_ns: 8,
            block_read_us: 60,
            disk_byte_ns: 2,
            patch_apply_base_us: 200,
            record_apply_us: 1,
        }
    }
}

impl CostModel {
    pub fn transfer_us(&self, bytes: u64) -> Micros {
        bytes * self.net_byte_ns / 1000
    }

    /// Time to rebuild a replica by copying a whole store from a peer.
    pub fn rereplication_us(&self, store_bytes: u64) -> Micros {
        self.base_latency_us + store_bytes * (self.net_byte_ns + self.disk_byte_ns) / 1000 + store_bytes / 8192 * self.block_read_us
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaConfig {
    pub store: Options,
    pub cost: CostModel,
    pub recovery_timeout_us: Micros,
    pub retransmit_us: Micros,
    pub max_batch: usize,
    /// Scans of the requested ranges before a healthy replica abstains.
    pub assembly_attempts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompactTarget {
    /// Whatever level is over its trigger, if any.
    Auto,
    Level(usize),
    /// Rewrite of one file, as scheduled after a read hit a bad block.
    File(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicaState {
    Normal,
    /// Entry `index` is a patch request for this replica; later entries are
    /// held back until a patch is applied.
    AwaitingPatch { request: PatchRequest, index: u64, since: Micros },
    Failed { reason: String },
}

/// What happened during recovery of one request on the corrupted replica.
#[derive(Debug, Clone)]
pub struct RecoveryRecord {
    pub replica: ReplicaId,
    pub request_id: u64,
    pub index: u64,
    pub ranges: Vec<CorruptKeyRange>,
    pub detected_at: Micros,
    pub completed_at: Micros,
    pub patch_from: ReplicaId,
    pub patch_keys: usize,
    pub patch_bytes: u64,
    pub stats: PatchStats,
    /// Contents of the ranges read right after the patch was applied.
    pub post_state: Result<Vec<(Vec<u8>, Vec<u8>)>, String>,
    pub store_bytes: u64,
}

impl RecoveryRecord {
    pub fn latency_us(&self) -> Micros {
        self.completed_at - self.detected_at
    }
}

#[derive(Debug, Clone)]
pub enum ReplicaEvent {
    Compaction { replica: ReplicaId, bytes_read: u64, bytes_written: u64 },
    CompactionError { replica: ReplicaId, request_id: u64, ranges: Vec<CorruptKeyRange>, at: Micros },
    PatchSent { from: ReplicaId, to: ReplicaId, request_id: u64, keys: usize, bytes: u64 },
    Abstained { replica: ReplicaId, request_id: u64 },
    Recovered(Box<RecoveryRecord>),
    RecoveryFailed { replica: ReplicaId, request_id: u64, at: Micros },
    Fatal { replica: ReplicaId, reason: String },
}

/// Outputs of one handler invocation, drained by the group.
#[derive(Debug, Default)]
pub struct Ctx {
    pub now: Micros,
    pub sends: Vec<(ReplicaId, Message, Micros)>,
    pub finish_patch_at: Option<Micros>,
    pub events: Vec<ReplicaEvent>,
}

impl Ctx {
    pub fn new(now: Micros) -> Self {
        Self { now, ..Self::default() }
    }

    fn send(&mut self, to: ReplicaId, msg: Message, extra_delay: Micros) {
        self.sends.push((to, msg, extra_delay));
    }
}

#[derive(Debug)]
struct OutgoingPatch {
    to: ReplicaId,
    patch: Patch,
    last_sent: Micros,
    give_up_at: Micros,
}

#[derive(Debug)]
struct OutstandingReport {
    request_id: u64,
    ranges: Vec<CorruptKeyRange>,
    last_sent: Micros,
}

#[derive(Debug)]
struct LeaderState {
    match_index: Vec<u64>,
    next_index: Vec<u64>,
    sent_commit: Vec<u64>,
    /// Commit index each follower has acknowledged knowing.
    acked_commit: Vec<u64>,
    seen_requests: HashSet<u64>,
    inflight: BTreeMap<(ReplicaId, Vec<CorruptKeyRange>), u64>,
}

#[derive(Debug)]
pub struct Replica {
    id: ReplicaId,
    group_size: usize,
    env: Arc<StorageEnv>,
    store: Store,
    log: ReplicaLog,
    config: ReplicaConfig,
    commit: u64,
    applied: u64,
    state: ReplicaState,
    staged: Option<Patch>,
    early: BTreeMap<u64, Patch>,
    completed: HashSet<u64>,
    outgoing: BTreeMap<u64, OutgoingPatch>,
    report: Option<OutstandingReport>,
    detected: BTreeMap<u64, Micros>,
    next_request: u64,
    leader: Option<LeaderState>,
}

pub const LEADER: ReplicaId = 0;

fn quorum(n: usize) -> usize {
    (n + 2) / 2
}

impl Replica {
    pub fn new(id: ReplicaId, group_size: usize, env: Arc<StorageEnv>, config: ReplicaConfig) -> Result<Self, String> {
        let store = Store::open(env.clone(), &format!("replica-{id}/db"), config.store.clone()).map_err(|e| e.to_string())?;
        let log = ReplicaLog::open(env.clone(), &format!("replica-{id}/consensus.log")).map_err(|e| e.to_string())?;
        let leader = (id == LEADER).then(|| LeaderState {
            match_index: vec![0; group_size],
            next_index: vec![1; group_size],
            sent_commit: vec![0; group_size],
            acked_commit: vec![0; group_size],
            seen_requests: HashSet::new(),
            inflight: BTreeMap::new(),
        });
        Ok(Self {
            id,
            group_size,
            env,
            store,
            log,
            config,
            commit: 0,
            applied: 0,
            state: ReplicaState::Normal,
            staged: None,
            early: BTreeMap::new(),
            completed: HashSet::new(),
            outgoing: BTreeMap::new(),
            report: None,
            detected: BTreeMap::new(),
            next_request: 0,
            leader,
        })
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn env(&self) -> &Arc<StorageEnv> {
        &self.env
    }

    pub fn log(&self) -> &ReplicaLog {
        &self.log
    }

    pub fn state(&self) -> &ReplicaState {
        &self.state
    }

    pub fn applied_index(&self) -> u64 {
        self.applied
    }

    pub fn commit_index(&self) -> u64 {
        self.commit
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.state, ReplicaState::Failed { .. })
    }

    pub fn is_leader(&self) -> bool {
        self.leader.is_some()
    }

    /// True when nothing is in flight from this replica's point of view.
    pub fn is_idle(&self, up: &[bool]) -> bool {
        if self.is_failed() {
            return true;
        }
        let base = matches!(self.state, ReplicaState::Normal)
            && self.staged.is_none()
            && self.report.is_none()
            && self.outgoing.is_empty()
            && self.applied >= self.commit.min(self.log.last_index());
        let leader_idle = self.leader.as_ref().is_none_or(|l| {
            (0..self.group_size)
                .filter(|&f| f != self.id && up[f])
                .all(|f| l.match_index[f] >= self.log.last_index() && l.acked_commit[f] >= self.commit)
        });
        base && leader_idle
    }

    fn fail(&mut self, reason: String, ctx: &mut Ctx) {
        ctx.events.push(ReplicaEvent::Fatal { replica: self.id, reason: reason.clone() });
        self.state = ReplicaState::Failed { reason };
    }

    fn append(&mut self, entry: LogEntry, ctx: &mut Ctx) -> bool {
        if let Payload::PatchRequest(req) = &entry.payload {
            if self.report.as_ref().is_some_and(|r| r.request_id == req.request_id) {
                self.report = None;
            }
        }
        if let Err(e) = self.log.append(entry) {
            self.fail(e.to_string(), ctx);
            return false;
        }
        true
    }

    /// Leader only: appends a write batch and starts replicating it.
    pub fn propose(&mut self, payload: Payload, ctx: &mut Ctx) -> Option<u64> {
        self.leader.as_ref()?;
        let index = self.log.last_index() + 1;
        if !self.append(LogEntry { index, payload }, ctx) {
            return None;
        }
        self.update_commit(ctx);
        self.replicate(ctx, false);
        Some(index)
    }

    fn replicate(&mut self, ctx: &mut Ctx, retransmit: bool) {
        let last = self.log.last_index();
        let commit = self.commit;
        let max = self.config.max_batch;
        let Some(l) = self.leader.as_mut() else { return };
        for f in 0..self.group_size {
            if f == self.id {
                continue;
            }
            if retransmit && l.match_index[f] < last {
                l.next_index[f] = l.match_index[f] + 1;
            }
            if l.next_index[f] <= last {
                let entries = self.log.entries_from(l.next_index[f], max);
                l.next_index[f] += entries.len() as u64;
                l.sent_commit[f] = commit;
                ctx.send(f, Message::AppendEntry { from: self.id, commit, entries }, 0);
            } else if l.sent_commit[f] < commit || (retransmit && (l.match_index[f] < last || l.acked_commit[f] < commit)) {
                l.sent_commit[f] = commit;
                ctx.send(f, Message::AppendEntry { from: self.id, commit, entries: Vec::new() }, 0);
            }
        }
    }

    fn update_commit(&mut self, ctx: &mut Ctx) {
        let last = self.log.last_index();
        let Some(l) = self.leader.as_mut() else { return };
        let mut acked: Vec<u64> = (0..self.group_size).map(|f| if f == self.id { last } else { l.match_index[f] }).collect();
        acked.sort_unstable_by(|a, b| b.cmp(a));
        let c = acked[quorum(self.group_size) - 1];
        if c > self.commit {
            self.commit = c;
            self.advance(ctx);
        }
    }

    pub fn handle(&mut self, msg: Message, ctx: &mut Ctx) {
        match msg {
            Message::AppendEntry { from, commit, entries } => {
                for entry in entries {
                    let last = self.log.last_index();
                    if entry.index == last + 1 {
                        if !self.append(entry, ctx) {
                            return;
                        }
                    } else if entry.index > last + 1 {
                        break;
                    }
                }
                self.commit = self.commit.max(commit.min(self.log.last_index()));
                ctx.send(from, Message::Ack { from: self.id, last_index: self.log.last_index(), commit: self.commit }, 0);
                self.advance(ctx);
            }
            Message::Ack { from, last_index, commit } => {
                if let Some(l) = self.leader.as_mut() {
                    l.match_index[from] = l.match_index[from].max(last_index);
                    l.acked_commit[from] = l.acked_commit[from].max(commit);
                    l.next_index[from] = l.next_index[from].max(last_index + 1);
                    self.update_commit(ctx);
                    self.replicate(ctx, false);
                }
            }
            Message::ReportCorruption { from, request_id, ranges } => self.on_report(from, request_id, ranges, ctx),
            Message::PatchTransfer(patch) => self.on_patch(patch, ctx),
            Message::PatchAck { from, request_id } => {
                if from == self.id || self.outgoing.get(&request_id).is_some_and(|o| o.to == from) {
                    self.outgoing.remove(&request_id);
                }
                if let Some(l) = self.leader.as_mut() {
                    l.inflight.retain(|(shard, _), id| !(*shard == from && *id == request_id));
                }
            }
        }
    }

    fn on_report(&mut self, from: ReplicaId, request_id: u64, ranges: Vec<CorruptKeyRange>, ctx: &mut Ctx) {
        let Some(l) = self.leader.as_mut() else { return };
        if !l.seen_requests.insert(request_id) {
            return;
        }
        let key = (from, ranges.clone());
        if l.inflight.contains_key(&key) {
            return;
        }
        l.inflight.insert(key, request_id);
        self.propose(Payload::PatchRequest(PatchRequest { request_id, corrupt_shard: from, ranges }), ctx);
    }

    /// Applies committed entries in order until blocked.
    pub fn advance(&mut self, ctx: &mut Ctx) {
        while matches!(self.state, ReplicaState::Normal) && self.staged.is_none() {
            let next = self.applied + 1;
            if next > self.commit.min(self.log.last_index()) {
                break;
            }
            let entry = self.log.get(next).expect("entry below last index").clone();
            match entry.payload {
                Payload::Write(ops) => {
                    if let Err(e) = self.store.write_batch(seq_base(next), ops) {
                        self.fail(format!("apply of entry {next}: {e}"), ctx);
                        return;
                    }
                    self.applied = next;
                    self.maybe_compact(CompactTarget::Auto, ctx);
                }
                Payload::PatchRequest(req) if req.corrupt_shard == self.id => {
                    let request_id = req.request_id;
                    self.state = ReplicaState::AwaitingPatch { request: req, index: next, since: ctx.now };
                    if let Some(p) = self.early.remove(&request_id) {
                        self.on_patch(p, ctx);
                    }
                    return;
                }
                Payload::PatchRequest(req) => {
                    self.assemble_patch(next, &req, ctx);
                    self.applied = next;
                }
            }
        }
    }

    fn assemble_patch(&mut self, index: u64, req: &PatchRequest, ctx: &mut Ctx) {
        let mut records = Vec::new();
        let mut blocks = 0;
        for r in &req.ranges {
            blocks += self.store.blocks_overlapping(&r.low, &r.high);
            let scan = (0..self.config.assembly_attempts.max(1)).map(|_| self.store.scan_range(&r.low, &r.high)).find(Result::is_ok);
            match scan {
                Some(Ok(kvs)) => records.extend(kvs),
                _ => {
                    ctx.events.push(ReplicaEvent::Abstained { replica: self.id, request_id: req.request_id });
                    return;
                }
            }
        }
        records.sort();
        records.dedup_by(|a, b| a.0 == b.0);
        let patch = Patch { request_id: req.request_id, index, from: self.id, records };
        let bytes = patch.payload_bytes();
        let cost = &self.config.cost;
        let delay = blocks as u64 * cost.block_read_us + bytes * cost.disk_byte_ns / 1000;
        ctx.events.push(ReplicaEvent::PatchSent {
            from: self.id,
            to: req.corrupt_shard,
            request_id: req.request_id,
            keys: patch.records.len(),
            bytes,
        });
        ctx.send(req.corrupt_shard, Message::PatchTransfer(patch.clone()), delay);
        self.outgoing.insert(
            req.request_id,
            OutgoingPatch {
                to: req.corrupt_shard,
                patch,
                last_sent: ctx.now + delay,
                give_up_at: ctx.now + self.config.recovery_timeout_us,
            },
        );
    }

    fn on_patch(&mut self, patch: Patch, ctx: &mut Ctx) {
        let ack = Message::PatchAck { from: self.id, request_id: patch.request_id };
        if self.completed.contains(&patch.request_id) {
            ctx.send(patch.from, ack, 0);
            return;
        }
        match &self.state {
            ReplicaState::AwaitingPatch { request, index, .. } if request.request_id == patch.request_id => {
                let verifies = patch.index == *index
                    && patch.records.iter().all(|(k, _)| request.ranges.iter().any(|r| r.contains(k)));
                if !verifies {
                    return;
                }
                ctx.send(patch.from, ack, 0);
                if self.staged.is_none() {
                    let cost = &self.config.cost;
                    ctx.finish_patch_at = Some(ctx.now + cost.patch_apply_base_us + patch.records.len() as u64 * cost.record_apply_us);
                    self.staged = Some(patch);
                }
            }
            ReplicaState::Failed { .. } => {}
            _ => {
                self.early.entry(patch.request_id).or_insert(patch);
            }
        }
    }

    /// Applies the staged patch as the effect of the request's log entry.
    pub fn finish_patch(&mut self, ctx: &mut Ctx) {
        let Some(patch) = self.staged.take() else { return };
        let ReplicaState::AwaitingPatch { request, index, .. } = self.state.clone() else { return };
        let stats = match self.store.apply_patch(seq_base(index), &request.ranges, &patch.records) {
            Ok(s) => s,
            Err(e) => {
                self.fail(format!("apply of patch at {index}: {e}"), ctx);
                return;
            }
        };
        let post_state = self.observe_ranges(&request.ranges);
        self.completed.insert(request.request_id);
        self.state = ReplicaState::Normal;
        self.applied = index;
        let detected_at = self.detected.remove(&request.request_id).unwrap_or(ctx.now);
        ctx.events.push(ReplicaEvent::Recovered(Box::new(RecoveryRecord {
            replica: self.id,
            request_id: request.request_id,
            index,
            ranges: request.ranges.clone(),
            detected_at,
            completed_at: ctx.now,
            patch_from: patch.from,
            patch_keys: patch.records.len(),
            patch_bytes: patch.payload_bytes(),
            stats,
            post_state,
            store_bytes: self.store.total_bytes(),
        })));
        let done = Message::PatchAck { from: self.id, request_id: request.request_id };
        if self.is_leader() {
            self.handle(done, ctx);
        } else {
            ctx.send(LEADER, done, 0);
        }
        self.advance(ctx);
    }

    /// Reads the recovered ranges as an outside observer, with on-read
    /// injection suspended so the observation itself is exact.
    fn observe_ranges(&self, ranges: &[CorruptKeyRange]) -> Result<Vec<(Vec<u8>, Vec<u8>)>, String> {
        let saved = self.env.injector();
        self.env.set_injector(None);
        let mut out = Vec::new();
        let mut result = Ok(());
        for r in ranges {
            match self.store.scan_range(&r.low, &r.high) {
                Ok(kvs) => out.extend(kvs),
                Err(e) => {
                    result = Err(e.to_string());
                    break;
                }
            }
        }
        self.env.set_injector(saved);
        result.map(|_| {
            out.sort();
            out.dedup();
            out
        })
    }

    /// Runs a compaction and reports any corrupted ranges it found.
    pub fn maybe_compact(&mut self, target: CompactTarget, ctx: &mut Ctx) {
        if !matches!(self.state, ReplicaState::Normal) || self.store.has_pending_compaction() {
            return;
        }
        let level = match target {
            CompactTarget::File(id) => Some(Err(id)),
            CompactTarget::Level(l) => Some(Ok(l)),
            CompactTarget::Auto => self.store.needs_compaction().map(Ok),
        };
        let result = match level {
            None => return,
            Some(Err(id)) => self.store.compact_file(id),
            Some(Ok(level)) => {
                if self.env.injector().is_some_and(|c| c.mode == InjectionMode::AtRest) {
                    self.env.corrupt_at_rest(&self.store.compaction_inputs(level));
                }
                self.store.compact_level(level)
            }
        };
        let report = match result {
            Ok(r) => r,
            Err(LsmError::UnknownFile(_) | LsmError::NothingToCompact | LsmError::CompactionPending) => return,
            Err(e) => {
                self.fail(format!("compaction: {e}"), ctx);
                return;
            }
        };
        ctx.events.push(ReplicaEvent::Compaction {
            replica: self.id,
            bytes_read: report.bytes_read,
            bytes_written: report.bytes_written,
        });
        if report.corrupt.is_empty() {
            if let Err(e) = self.store.install_pending() {
                self.fail(format!("install: {e}"), ctx);
            }
            return;
        }
        self.next_request += 1;
        let request_id = ((self.id as u64 + 1) << 40) | self.next_request;
        self.detected.insert(request_id, ctx.now);
        ctx.events.push(ReplicaEvent::CompactionError { replica: self.id, request_id, ranges: report.corrupt.clone(), at: ctx.now });
        self.report = Some(OutstandingReport { request_id, ranges: report.corrupt.clone(), last_sent: ctx.now });
        self.send_report(ctx);
    }

    fn send_report(&mut self, ctx: &mut Ctx) {
        let Some(r) = self.report.as_mut() else { return };
        r.last_sent = ctx.now;
        let msg = Message::ReportCorruption { from: self.id, request_id: r.request_id, ranges: r.ranges.clone() };
        if self.is_leader() {
            self.handle(msg, ctx);
        } else {
            ctx.send(LEADER, msg, 0);
        }
    }

    /// Periodic work: retransmission and recovery timeouts.
    pub fn tick(&mut self, ctx: &mut Ctx) {
        if self.is_failed() {
            return;
        }
        let now = ctx.now;
        let rto = self.config.retransmit_us;
        if self.leader.is_some() {
            self.replicate(ctx, true);
        }
        if self.report.as_ref().is_some_and(|r| now >= r.last_sent + rto) {
            self.send_report(ctx);
        }
        self.outgoing.retain(|_, o| now < o.give_up_at);
        for o in self.outgoing.values_mut() {
            if now >= o.last_sent + rto {
                o.last_sent = now;
                ctx.sends.push((o.to, Message::PatchTransfer(o.patch.clone()), 0));
            }
        }
        if let ReplicaState::AwaitingPatch { request, since, .. } = &self.state {
            if self.staged.is_none() && now >= since + self.config.recovery_timeout_us {
                let request_id = request.request_id;
                ctx.events.push(ReplicaEvent::RecoveryFailed { replica: self.id, request_id, at: now });
                self.store.discard_pending();
                self.state = ReplicaState::Failed { reason: format!("no patch for request {request_id}") };
            }
        }
    }
}
