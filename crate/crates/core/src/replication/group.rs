use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fault::StorageEnv;
use crate::lsm::{LsmError, Options, Store};

use super::log::{seq_base, LogEntry, Payload, ReplicaId};
use super::replica::{CompactTarget, CostModel, Ctx, Micros, RecoveryRecord, Replica, ReplicaConfig, ReplicaEvent, LEADER};
use super::wire::Message;
use super::{GroupError, ReadError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consistency {
    /// Served by the leader.
    Strong,
    /// Served by any replica that has applied the given index.
    ReadAfter(u64),
    /// Served by any live replica.
    Eventual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupConfig {
    pub replicas: usize,
    pub seed: u64,
    /// Probability that any single message is lost in transit.
    pub drop_rate: f64,
    pub tick_us: Micros,
    pub write_timeout_us: Micros,
    pub replica: ReplicaConfig,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            replicas: 3,
            seed: 0,
            drop_rate: 0.0,
            tick_us: 2_000,
            write_timeout_us: 1_000_000,
            replica: ReplicaConfig {
                store: Options::default(),
                cost: CostModel::default(),
                recovery_timeout_us: 5_000_000,
                retransmit_us: 10_000,
                max_batch: 64,
                assembly_attempts: 1,
            },
        }
    }
}

#[derive(Debug)]
enum Event {
    Deliver { to: ReplicaId, frame: Vec<u8> },
    Tick { replica: ReplicaId },
    FinishPatch { replica: ReplicaId },
    Compact { replica: ReplicaId, target: CompactTarget },
}

/// One shard group driven by a deterministic event queue.
#[derive(Debug)]
pub struct ShardGroup {
    config: GroupConfig,
    replicas: Vec<Replica>,
    up: Vec<bool>,
    now: Micros,
    queue: BTreeMap<(Micros, u64), Event>,
    next_event: u64,
    rng: ChaCha8Rng,
    events: Vec<ReplicaEvent>,
    recoveries: Vec<RecoveryRecord>,
    next_read: usize,
    messages_sent: u64,
    messages_dropped: u64,
}

impl ShardGroup {
    /// Builds a group on fresh in-memory storage.
    pub fn new(config: GroupConfig) -> Result<Self, GroupError> {
        let envs = (0..config.replicas).map(|_| Arc::new(StorageEnv::in_memory())).collect();
        Self::with_envs(config, envs)
    }

    pub fn with_envs(config: GroupConfig, envs: Vec<Arc<StorageEnv>>) -> Result<Self, GroupError> {
        assert_eq!(envs.len(), config.replicas, "one storage env per replica");
        let n = config.replicas;
        let replicas = envs
            .into_iter()
            .enumerate()
            .map(|(id, env)| Replica::new(id, n, env, config.replica.clone()).map_err(|reason| GroupError::Startup { replica: id, reason }))
            .collect::<Result<Vec<_>, _>>()?;
        let mut group = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            replicas,
            up: vec![true; n],
            now: 0,
            queue: BTreeMap::new(),
            next_event: 0,
            events: Vec::new(),
            recoveries: Vec::new(),
            next_read: 0,
            messages_sent: 0,
            messages_dropped: 0,
        };
        for r in 0..n {
            let at = group.config.tick_us + r as u64;
            group.schedule(at, Event::Tick { replica: r });
        }
        Ok(group)
    }

    pub fn config(&self) -> &GroupConfig {
        &self.config
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn replica(&self, id: ReplicaId) -> &Replica {
        &self.replicas[id]
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    pub fn leader(&self) -> &Replica {
        &self.replicas[LEADER]
    }

    /// All replica events so far, in order.
    pub fn events(&self) -> &[ReplicaEvent] {
        &self.events
    }

    pub fn recoveries(&self) -> &[RecoveryRecord] {
        &self.recoveries
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages_sent
    }

    pub fn messages_dropped(&self) -> u64 {
        self.messages_dropped
    }

    pub fn is_up(&self, id: ReplicaId) -> bool {
        self.up[id]
    }

    /// Takes a replica off the network (messages to it are lost) or puts it
    /// back.
    pub fn set_up(&mut self, id: ReplicaId, up: bool) {
        self.up[id] = up;
    }

    fn schedule(&mut self, at: Micros, event: Event) {
        self.next_event += 1;
        self.queue.insert((at, self.next_event), event);
    }

    fn drain(&mut self, from: ReplicaId, ctx: Ctx) {
        let cost = self.config.replica.cost.clone();
        for (to, msg, extra) in ctx.sends {
            let frame = msg.encode();
            self.messages_sent += 1;
            if to != from && self.config.drop_rate > 0.0 && self.rng.random::<f64>() < self.config.drop_rate {
                self.messages_dropped += 1;
                continue;
            }
            let jitter = if cost.jitter_us > 0 { self.rng.random_range(0..=cost.jitter_us) } else { 0 };
            let at = ctx.now + extra + cost.base_latency_us + jitter + cost.transfer_us(frame.len() as u64);
            self.schedule(at, Event::Deliver { to, frame });
        }
        if let Some(at) = ctx.finish_patch_at {
            self.schedule(at, Event::FinishPatch { replica: from });
        }
        for e in ctx.events {
            if let ReplicaEvent::Recovered(r) = &e {
                self.recoveries.push((**r).clone());
            }
            self.events.push(e);
        }
    }

    fn with_replica(&mut self, id: ReplicaId, f: impl FnOnce(&mut Replica, &mut Ctx)) {
        let mut ctx = Ctx::new(self.now);
        f(&mut self.replicas[id], &mut ctx);
        self.drain(id, ctx);
    }

    /// Processes the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((at, _), event)) = self.queue.pop_first() else { return false };
        self.now = self.now.max(at);
        match event {
            Event::Deliver { to, frame } => {
                if self.up[to] && !self.replicas[to].is_failed() {
                    let msg = Message::decode(&frame).expect("frames are built by the group");
                    self.with_replica(to, |r, ctx| r.handle(msg, ctx));
                }
            }
            Event::Tick { replica } => {
                if self.up[replica] {
                    self.with_replica(replica, |r, ctx| r.tick(ctx));
                }
                let at = self.now + self.config.tick_us;
                self.schedule(at, Event::Tick { replica });
            }
            Event::FinishPatch { replica } => self.with_replica(replica, |r, ctx| r.finish_patch(ctx)),
            Event::Compact { replica, target } => self.with_replica(replica, |r, ctx| r.maybe_compact(target, ctx)),
        }
        true
    }

    /// Runs events up to and including time `until`.
    pub fn run_until(&mut self, until: Micros) {
        while self.queue.first_key_value().is_some_and(|((at, _), _)| *at <= until) {
            self.step();
        }
        self.now = self.now.max(until);
    }

    pub fn run_for(&mut self, us: Micros) {
        self.run_until(self.now + us);
    }

    fn quiescent(&self) -> bool {
        let busy_queue = self.queue.values().any(|e| !matches!(e, Event::Tick { .. }));
        !busy_queue && self.replicas.iter().enumerate().all(|(i, r)| !self.up[i] || r.is_idle(&self.up))
    }

    /// Runs until no messages, patches or compactions are outstanding, or
    /// `max_us` of simulated time passes. Returns whether it settled.
    pub fn settle(&mut self, max_us: Micros) -> bool {
        let deadline = self.now + max_us;
        while !self.quiescent() {
            if self.queue.first_key_value().is_none_or(|((at, _), _)| *at > deadline) {
                self.now = self.now.max(deadline);
                return false;
            }
            self.step();
        }
        true
    }

    /// Appends a batch at the leader and waits for a quorum to commit it.
    pub fn propose_write(&mut self, ops: Vec<crate::lsm::WriteOp>) -> Result<u64, GroupError> {
        if !self.up[LEADER] || self.replicas[LEADER].is_failed() {
            return Err(GroupError::LeaderUnavailable);
        }
        let mut index = None;
        self.with_replica(LEADER, |r, ctx| index = r.propose(Payload::Write(ops), ctx));
        let index = index.ok_or(GroupError::LeaderUnavailable)?;
        let deadline = self.now + self.config.write_timeout_us;
        while self.replicas[LEADER].commit_index() < index {
            if self.queue.first_key_value().is_none_or(|((at, _), _)| *at > deadline) {
                self.now = self.now.max(deadline);
                return Err(GroupError::NoQuorum { index });
            }
            self.step();
        }
        Ok(index)
    }

    /// Queues a compaction on one replica at the current time.
    pub fn schedule_compaction(&mut self, replica: ReplicaId, target: CompactTarget) {
        self.schedule(self.now, Event::Compact { replica, target });
    }

    fn candidates(&self, consistency: Consistency) -> Vec<ReplicaId> {
        let live = |i: &ReplicaId| self.up[*i] && !self.replicas[*i].is_failed();
        match consistency {
            Consistency::Strong => [LEADER].into_iter().filter(live).collect(),
            Consistency::ReadAfter(index) => (0..self.len()).filter(live).filter(|&i| self.replicas[i].applied_index() >= index).collect(),
            Consistency::Eventual => (0..self.len()).filter(live).collect(),
        }
    }

    /// Reads `key` from the given replica. A corrupted block makes the
    /// replica schedule a compaction of the affected file.
    pub fn read_on(&mut self, replica: ReplicaId, key: &[u8]) -> Result<Option<Vec<u8>>, ReadError> {
        match self.replicas[replica].store().get(key) {
            Ok(v) => Ok(v),
            Err(LsmError::Corruption(range)) => {
                self.schedule_compaction(replica, CompactTarget::File(range.file_id));
                Err(ReadError::Corruption { replica, range })
            }
            Err(source) => Err(ReadError::Store { replica, source }),
        }
    }

    /// One read attempt at the requested consistency. Lagging replicas make
    /// a `ReadAfter` read wait (in simulated time) up to the write timeout.
    pub fn read(&mut self, key: &[u8], consistency: Consistency) -> Result<Option<Vec<u8>>, ReadError> {
        let replica = self.pick(consistency, &[])?;
        self.read_on(replica, key)
    }

    /// Reads, retrying on a different replica after each corruption error.
    pub fn read_with_retry(&mut self, key: &[u8], consistency: Consistency) -> Result<Option<Vec<u8>>, ReadError> {
        let mut tried = Vec::new();
        loop {
            let replica = match self.pick(consistency, &tried) {
                Ok(r) => r,
                Err(ReadError::Unavailable) if !tried.is_empty() => {
                    return self.read_on(*tried.last().expect("non-empty"), key);
                }
                Err(e) => return Err(e),
            };
            match self.read_on(replica, key) {
                Err(ReadError::Corruption { .. }) => tried.push(replica),
                other => return other,
            }
        }
    }

    fn pick(&mut self, consistency: Consistency, exclude: &[ReplicaId]) -> Result<ReplicaId, ReadError> {
        let deadline = self.now + self.config.write_timeout_us;
        loop {
            let c: Vec<_> = self.candidates(consistency).into_iter().filter(|r| !exclude.contains(r)).collect();
            if !c.is_empty() {
                self.next_read += 1;
                return Ok(c[self.next_read % c.len()]);
            }
            let Consistency::ReadAfter(index) = consistency else { return Err(ReadError::Unavailable) };
            let live_left = (0..self.len()).any(|i| self.up[i] && !self.replicas[i].is_failed() && !exclude.contains(&i));
            if !live_left {
                return Err(ReadError::Unavailable);
            }
            if self.queue.first_key_value().is_none_or(|((at, _), _)| *at > deadline) {
                return Err(ReadError::Timeout { index });
            }
            self.step();
        }
    }
}

/// Contents of a fresh store after applying the write entries with index
/// below `upto`. Corruption-free by construction.
pub fn replay_prefix(entries: &[LogEntry], upto: u64) -> Result<Vec<(Vec<u8>, Vec<u8>)>, LsmError> {
    let store = Store::open(Arc::new(StorageEnv::in_memory()), "replay", Options { memtable_bytes: usize::MAX, ..Options::default() })?;
    for e in entries.iter().filter(|e| e.index < upto) {
        if let Payload::Write(ops) = &e.payload {
            store.write_batch(seq_base(e.index), ops.clone())?;
        }
    }
    store.scan_all()
}
