//! A replica process: several independent RAFT instances, one per physical
//! log, over one shared key-value store.
//!
//! Each instance is driven by [`Server::run_instance`], which handles a burst
//! of packets, runs timers, proposes queued client requests, applies committed
//! entries and drains applied entries to the flashlog. Instances share nothing
//! but the store, the term board and the ganged-operation barrier.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::entry::{EntryBody, GangPart};
use crate::ganged::{Barrier, GangStamp, GangStep, NonceSource, Resolution, TermBoard, COORDINATOR};
use crate::kv::{Reply, SharedKv};
use crate::medium::Medium;
use crate::nvm::AppendClass;
use crate::payload::Payload;
use crate::raft::{Nanos, ProposeError, Raft, RaftConfig, MILLIS};
use crate::request::{decode_write_ops, gang_sections, ClientId, LogId, Op, OpKind, Request, Status};
use crate::storage::{LogStore, StorageConfig, StorageError};
use crate::transport::Outbox;
use crate::wire::{Addr, Message, NodeId, Packet};

/// Physical log that owns `key`.
pub fn route(key: &[u8], logs: usize) -> LogId {
    (xxhash_rust::xxh64::xxh64(key, 0) % logs as u64) as LogId
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub nodes: usize,
    pub logs: usize,
    pub raft: RaftConfig,
    /// How long a weak read may wait for the apply cursor.
    pub weak_read_timeout: Nanos,
    /// Move every log's leadership to the node leading the coordinator log,
    /// so ganged operations can be dispatched.
    pub colocate: bool,
    /// Ganged operations queued behind the one in flight.
    pub max_queued_gangs: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            nodes: 3,
            logs: 1,
            raft: RaftConfig::default(),
            weak_read_timeout: 100 * MILLIS,
            colocate: false,
            max_queued_gangs: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ServerStats {
    pub client_requests: u64,
    pub redirects: u64,
    pub responses: u64,
    pub weak_reads: u64,
    pub weak_read_timeouts: u64,
    pub gangs_dispatched: u64,
    pub gangs_applied: u64,
    pub gangs_failed: u64,
    pub snapshots: u64,
    pub leadership_transfers: u64,
}

/// Work done by one [`Server::run_instance`] call, for cost accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunReport {
    pub received: usize,
    pub appended: u64,
    pub applied_requests: u64,
    pub kv_ops: u64,
    pub drained: u64,
    /// The apply cursor is parked on a ganged entry.
    pub blocked: bool,
}

/// One instance's decision on a ganged entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GangEvent {
    pub nonce: crate::ganged::Nonce,
    pub log: LogId,
    pub participants: u64,
    pub client: ClientId,
    pub seq: u64,
    pub snapshot: bool,
    pub applied: bool,
    /// Status sent to the client by this instance, if any.
    pub response: Option<Status>,
}

struct WeakWait {
    client: ClientId,
    seq: u64,
    key: Vec<u8>,
    target: u64,
    deadline: Nanos,
}

/// A client request that reached a replica not knowing a live leader.
struct Orphan {
    client: ClientId,
    session_term: u64,
    request: Payload,
    deadline: Nanos,
}

struct QueuedGang {
    client: ClientId,
    seq: u64,
    request: Payload,
    snapshot: bool,
}

struct Instance<M: Medium> {
    raft: Raft<M>,
    /// Validated client requests waiting to be proposed.
    queue: Vec<(ClientId, u64, Payload)>,
    /// Clients whose requests sit in uncommitted entries, by entry index.
    proposed: BTreeMap<u64, Vec<(ClientId, u64)>>,
    weak: Vec<WeakWait>,
    orphans: Vec<Orphan>,
    /// Coordinator only: ganged operations behind the one in flight.
    gangs: VecDeque<QueuedGang>,
    gang_in_flight: Option<crate::ganged::Nonce>,
    transfer_to: Option<NodeId>,
    last_campaign: Nanos,
    was_leader: bool,
    blocked: bool,
}

pub struct Server<M: Medium> {
    me: NodeId,
    cfg: ServerConfig,
    instances: Vec<Instance<M>>,
    kv: SharedKv,
    board: Arc<TermBoard>,
    barrier: Arc<Barrier>,
    /// Apply cursor of every instance, read when capturing a snapshot.
    cursors: Arc<Vec<AtomicU64>>,
    nonces: NonceSource,
    stats: ServerStats,
    gang_events: Vec<GangEvent>,
}

impl<M: Medium> std::fmt::Debug for Server<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server").field("me", &self.me).field("logs", &self.instances.len()).finish()
    }
}

impl<M: Medium> Server<M> {
    /// Opens every log of node `me` from its `(nvm, flash)` media. The store is
    /// rebuilt by replaying the recovered logs through the normal apply path.
    pub fn open(
        me: NodeId,
        cfg: ServerConfig,
        storage: StorageConfig,
        media: Vec<(M, M)>,
        kv: SharedKv,
        seed: u64,
        now: Nanos,
    ) -> Result<Self, StorageError> {
        assert_eq!(media.len(), cfg.logs, "one medium pair per log");
        let board = Arc::new(TermBoard::new(cfg.logs));
        let mut instances = Vec::with_capacity(cfg.logs);
        for (log, (nvm, flash)) in media.into_iter().enumerate() {
            let store = LogStore::open(nvm, flash, storage)?;
            let raft = Raft::new(me, log as LogId, cfg.nodes, store, cfg.raft, Arc::clone(&board), seed, now);
            instances.push(Instance {
                raft,
                queue: Vec::new(),
                proposed: BTreeMap::new(),
                weak: Vec::new(),
                orphans: Vec::new(),
                gangs: VecDeque::new(),
                gang_in_flight: None,
                transfer_to: None,
                last_campaign: 0,
                was_leader: false,
                blocked: false,
            });
        }
        Ok(Server {
            me,
            cfg,
            instances,
            kv,
            board,
            barrier: Arc::new(Barrier::new()),
            cursors: Arc::new((0..cfg.logs).map(|_| AtomicU64::new(0)).collect()),
            nonces: NonceSource::new(((seed & 0xFFFF_FFFF) << 16) | me as u64),
            stats: ServerStats::default(),
            gang_events: Vec::new(),
        })
    }

    pub fn id(&self) -> NodeId {
        self.me
    }

    pub fn logs(&self) -> usize {
        self.instances.len()
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn raft(&self, log: LogId) -> &Raft<M> {
        &self.instances[log as usize].raft
    }

    pub fn kv(&self) -> &SharedKv {
        &self.kv
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn barrier(&self) -> &Barrier {
        &self.barrier
    }

    /// Ganged-entry decisions since the last call.
    pub fn take_gang_events(&mut self) -> Vec<GangEvent> {
        std::mem::take(&mut self.gang_events)
    }

    pub fn is_blocked(&self, log: LogId) -> bool {
        self.instances[log as usize].blocked
    }

    /// Earliest time instance `log` needs to run without new packets.
    pub fn next_deadline(&self, log: LogId) -> Nanos {
        let inst = &self.instances[log as usize];
        let weak = inst.weak.iter().map(|w| w.deadline).min().unwrap_or(Nanos::MAX);
        let orphan = inst.orphans.iter().map(|o| o.deadline).min().unwrap_or(Nanos::MAX);
        inst.raft.next_deadline().min(weak).min(orphan)
    }

    /// Starts an election for `log` right away.
    pub fn campaign(&mut self, log: LogId, now: Nanos, out: &mut Outbox) {
        self.instances[log as usize].raft.start_election(now, out);
    }

    fn respond(&mut self, out: &mut Outbox, log: LogId, client: ClientId, seq: u64, reply: Reply) {
        self.stats.responses += 1;
        let term = self.instances[log as usize].raft.term();
        let msg = Message::ClientResponse { seq, status: reply.status, value: reply.value };
        let p = Packet { src: Addr::Node(self.me), dst: Addr::Client(client), log, term, msg };
        if out.send(p).is_err() {
            // A read value too large for one datagram.
            let p = Packet {
                src: Addr::Node(self.me),
                dst: Addr::Client(client),
                log,
                term,
                msg: Message::ClientResponse { seq, status: Status::Invalid, value: None },
            };
            let _ = out.send(p);
        }
    }

    fn redirect(&mut self, out: &mut Outbox, log: LogId, client: ClientId, seq: u64) {
        let inst = &self.instances[log as usize];
        let leader = inst.raft.leader().filter(|&l| l != self.me);
        let term = inst.raft.term();
        self.stats.redirects += 1;
        let p = Packet {
            src: Addr::Node(self.me),
            dst: Addr::Client(client),
            log,
            term,
            msg: Message::Redirect { seq, leader },
        };
        let _ = out.send(p);
    }

    /// Runs one scheduling quantum of instance `log`.
    pub fn run_instance(&mut self, log: LogId, now: Nanos, packets: Vec<Packet>, out: &mut Outbox) -> RunReport {
        let appended_before = self.instances[log as usize].raft.stats().entries_appended;
        let mut report = RunReport { received: packets.len(), ..Default::default() };
        for p in packets {
            self.handle_packet(log, now, p, out);
        }
        self.instances[log as usize].raft.tick(now, out);
        self.adopt_orphans(log, now, out);
        self.colocate(log, now, out);
        self.propose_queued(log, now, out);
        self.apply(log, now, out, &mut report);
        self.expire_weak(log, now, out);
        self.watch_role(log, out);
        let inst = &mut self.instances[log as usize];
        let applied = inst.raft.applied();
        let drain = inst.raft.store_mut().drain(applied).expect("draining to the flashlog");
        report.drained = drain.drained.end - drain.drained.start;
        report.appended = inst.raft.stats().entries_appended - appended_before;
        report.blocked = inst.blocked;
        report
    }

    fn handle_packet(&mut self, log: LogId, now: Nanos, p: Packet, out: &mut Outbox) {
        match p.msg {
            Message::ClientRequest { request } => {
                let Addr::Client(client) = p.src else { return };
                self.on_client_request(log, now, client, p.term, request, out);
            }
            Message::GangFanIn { stamp, request, section } => {
                if p.src == Addr::Node(self.me) {
                    self.on_fan_in(log, now, stamp, request, section, out);
                }
            }
            _ => self.instances[log as usize].raft.handle(now, p, out),
        }
    }

    fn on_client_request(
        &mut self,
        log: LogId,
        now: Nanos,
        client: ClientId,
        session_term: u64,
        request: Payload,
        out: &mut Outbox,
    ) {
        self.stats.client_requests += 1;
        let req = match Request::decode(&request) {
            Ok(r) if r.client == client => r,
            Ok(r) => return self.respond(out, log, client, r.seq, Reply::status(Status::Invalid)),
            Err(_) => return,
        };
        let seq = req.seq;
        let inst = &mut self.instances[log as usize];
        if !inst.raft.is_leader() {
            if inst.raft.fresh_leader(now).is_some() {
                self.redirect(out, log, client, seq);
            } else {
                // Hold it until an election settles instead of pointing the
                // client at a leader that may be gone.
                let deadline = now + inst.raft.config().election_max;
                inst.orphans.retain(|o| o.client != client);
                inst.orphans.push(Orphan { client, session_term, request, deadline });
            }
            return;
        }
        if inst.transfer_to.is_some() {
            return self.respond(out, log, client, seq, Reply::status(Status::Busy));
        }
        if let Some(key) = req.op.key() {
            if route(key, self.cfg.logs) != log {
                return self.respond(out, log, client, seq, Reply::status(Status::Invalid));
            }
        }
        match req.op.kind() {
            OpKind::WeakGet => {
                if inst.raft.term() < session_term {
                    return self.respond(out, log, client, seq, Reply::status(Status::StaleLeader));
                }
                let target = inst.raft.last_index();
                let Op::WeakGet { key } = req.op else { unreachable!() };
                if inst.raft.applied() >= target {
                    self.stats.weak_reads += 1;
                    let reply = self.kv.lock().read(&key);
                    self.respond(out, log, client, seq, reply);
                } else {
                    let deadline = now + self.cfg.weak_read_timeout;
                    self.instances[log as usize].weak.push(WeakWait { client, seq, key, target, deadline });
                }
            }
            OpKind::Gang | OpKind::Snapshot => {
                if log != COORDINATOR {
                    return self.respond(out, log, client, seq, Reply::status(Status::Invalid));
                }
                if let Op::Gang { sections } = &req.op {
                    let bad = sections.iter().any(|s| {
                        s.log as usize >= self.cfg.logs
                            || s.ops.iter().any(|op| route(op.key(), self.cfg.logs) != s.log)
                    });
                    if bad {
                        return self.respond(out, log, client, seq, Reply::status(Status::Invalid));
                    }
                }
                if !self.instances.iter().all(|i| i.raft.is_leader()) {
                    return self.respond(out, log, client, seq, Reply::status(Status::NotColocated));
                }
                let snapshot = req.op.kind() == OpKind::Snapshot;
                let coord = &mut self.instances[COORDINATOR as usize];
                if coord.gangs.len() >= self.cfg.max_queued_gangs {
                    return self.respond(out, log, client, seq, Reply::status(Status::Busy));
                }
                coord.gangs.push_back(QueuedGang { client, seq, request, snapshot });
                self.dispatch_gang(now, out);
            }
            _ => {
                self.instances[log as usize].queue.push((client, seq, request));
            }
        }
    }

    /// Stamps the next queued ganged operation and hands each participant its
    /// section. One operation is in flight at a time.
    fn dispatch_gang(&mut self, now: Nanos, out: &mut Outbox) {
        let coord = &self.instances[COORDINATOR as usize];
        if coord.gang_in_flight.is_some() || coord.gangs.is_empty() {
            return;
        }
        if !self.instances.iter().all(|i| i.raft.is_leader()) {
            let queued: Vec<_> = self.instances[COORDINATOR as usize].gangs.drain(..).collect();
            for g in queued {
                self.respond(out, COORDINATOR, g.client, g.seq, Reply::status(Status::NotColocated));
            }
            return;
        }
        let g = self.instances[COORDINATOR as usize].gangs.pop_front().unwrap();
        let mut parts: Vec<(LogId, Range<u32>)> = if g.snapshot {
            (0..self.cfg.logs as LogId).map(|l| (l, 0..0)).collect()
        } else {
            match gang_sections(&g.request) {
                Ok(s) => s.into_iter().map(|(l, r)| (l, r.start as u32..r.end as u32)).collect(),
                Err(_) => return self.respond(out, COORDINATOR, g.client, g.seq, Reply::status(Status::Invalid)),
            }
        };
        if !parts.iter().any(|(l, _)| *l == COORDINATOR) {
            parts.push((COORDINATOR, 0..0));
        }
        parts.sort_by_key(|(l, _)| *l);
        let view = parts.iter().map(|(l, _)| (*l, self.instances[*l as usize].raft.term())).collect();
        let stamp = Arc::new(GangStamp {
            nonce: self.nonces.next(now),
            client: g.client,
            seq: g.seq,
            snapshot: g.snapshot,
            view,
        });
        self.stats.gangs_dispatched += 1;
        if g.snapshot {
            self.stats.snapshots += 1;
        }
        for (l, section) in parts {
            if l == COORDINATOR {
                continue;
            }
            let msg = Message::GangFanIn { stamp: Arc::clone(&stamp), request: g.request.clone(), section };
            let p = Packet {
                src: Addr::Node(self.me),
                dst: Addr::Node(self.me),
                log: l,
                term: stamp.term_of(l).unwrap(),
                msg,
            };
            out.send(p).expect("fan-in packets are not size limited");
        }
        let coord_section = 0..0;
        let section = stamp
            .view
            .first()
            .filter(|(l, _)| *l == COORDINATOR)
            .and_then(|_| {
                if g.snapshot {
                    None
                } else {
                    gang_sections(&g.request).ok()?.into_iter().find(|(l, _)| *l == COORDINATOR)
                }
            })
            .map(|(_, r)| r.start as u32..r.end as u32)
            .unwrap_or(coord_section);
        let nonce = stamp.nonce;
        let body = EntryBody::Gang(GangPart { stamp, request: g.request, section });
        let coord = &mut self.instances[COORDINATOR as usize];
        match coord.raft.propose(now, body, AppendClass::Reserved, out) {
            Ok(index) => {
                coord.gang_in_flight = Some(nonce);
                coord.proposed.entry(index).or_default().push((g.client, g.seq));
            }
            Err(e) => {
                let status = match e {
                    ProposeError::LogFull => Status::LogFull,
                    ProposeError::NotLeader => Status::NotLeader,
                    ProposeError::TooLarge => Status::Invalid,
                };
                if e == ProposeError::LogFull {
                    coord.raft.abdicate(now, out);
                }
                self.respond(out, COORDINATOR, g.client, g.seq, Reply::status(status));
            }
        }
    }

    fn on_fan_in(
        &mut self,
        log: LogId,
        now: Nanos,
        stamp: Arc<GangStamp>,
        request: Payload,
        section: Range<u32>,
        out: &mut Outbox,
    ) {
        let raft = &mut self.instances[log as usize].raft;
        // A section appended under any other term than the stamped one could
        // not be told apart from one that will never arrive.
        if !raft.is_leader() || Some(raft.term()) != stamp.term_of(log) {
            return;
        }
        let body = EntryBody::Gang(GangPart { stamp, request, section });
        if let Err(ProposeError::LogFull) = raft.propose(now, body, AppendClass::Reserved, out) {
            // Bump the term so the operation is seen to fail everywhere.
            raft.abdicate(now, out);
        }
    }

    /// Serves or redirects parked requests once a leader is known.
    fn adopt_orphans(&mut self, log: LogId, now: Nanos, out: &mut Outbox) {
        let inst = &mut self.instances[log as usize];
        if inst.orphans.is_empty() {
            return;
        }
        let leader = inst.raft.fresh_leader(now);
        let orphans: Vec<Orphan> = if leader.is_some() {
            std::mem::take(&mut inst.orphans)
        } else {
            inst.orphans.retain(|o| o.deadline > now);
            return;
        };
        for o in orphans {
            self.stats.client_requests -= 1;
            self.on_client_request(log, now, o.client, o.session_term, o.request, out);
        }
    }

    /// Chains queued requests into entries and proposes them.
    fn propose_queued(&mut self, log: LogId, now: Nanos, out: &mut Outbox) {
        let inst = &mut self.instances[log as usize];
        if inst.queue.is_empty() {
            return;
        }
        let queue = std::mem::take(&mut inst.queue);
        if !inst.raft.is_leader() {
            for (c, s, _) in queue {
                self.redirect(out, log, c, s);
            }
            return;
        }
        if inst.transfer_to.is_some() {
            // Appending now would leave the transfer target behind and cost it
            // the vote.
            for (c, s, _) in queue {
                self.respond(out, log, c, s, Reply::status(Status::Busy));
            }
            return;
        }
        let limit = inst.raft.config().max_entry_body().min(inst.raft.store().max_entry());
        let max_batch = if inst.raft.config().batching { inst.raft.config().max_batch } else { 1 };
        let mut batches: Vec<Vec<(ClientId, u64, Payload)>> = Vec::new();
        let mut size = 0;
        for item in queue {
            let len = 4 + item.2.len();
            let start_new = match batches.last() {
                None => true,
                Some(b) => b.len() >= max_batch || 3 + size + len > limit,
            };
            if start_new {
                batches.push(Vec::new());
                size = 0;
            }
            size += len;
            batches.last_mut().unwrap().push(item);
        }
        for batch in batches {
            let inst = &mut self.instances[log as usize];
            let clients: Vec<(ClientId, u64)> = batch.iter().map(|(c, s, _)| (*c, *s)).collect();
            let body = EntryBody::Batch(batch.into_iter().map(|(_, _, p)| p).collect());
            match inst.raft.propose(now, body, AppendClass::Normal, out) {
                Ok(index) => {
                    inst.proposed.insert(index, clients);
                }
                Err(e) => {
                    let status = match e {
                        ProposeError::LogFull => Status::LogFull,
                        ProposeError::TooLarge => Status::Invalid,
                        ProposeError::NotLeader => Status::NotLeader,
                    };
                    for (c, s) in clients {
                        self.respond(out, log, c, s, Reply::status(status));
                    }
                }
            }
        }
    }

    /// Moves this log's leadership to the node leading the coordinator log.
    fn colocate(&mut self, log: LogId, now: Nanos, out: &mut Outbox) {
        if !self.cfg.colocate || log == COORDINATOR {
            return;
        }
        let coord = &self.instances[COORDINATOR as usize].raft;
        let target = coord.leader().filter(|&l| l != self.me && coord.term() > 0);
        let heartbeat = self.cfg.raft.heartbeat;
        let inst = &mut self.instances[log as usize];
        if !inst.raft.is_leader() {
            inst.transfer_to = None;
            return;
        }
        match target {
            Some(x) => {
                if inst.transfer_to != Some(x) {
                    inst.transfer_to = Some(x);
                    inst.last_campaign = 0;
                    self.stats.leadership_transfers += 1;
                }
                if inst.raft.replicated_to(x) {
                    if inst.last_campaign == 0 || now >= inst.last_campaign + heartbeat {
                        inst.last_campaign = now.max(1);
                        inst.raft.send_campaign(x, out);
                    }
                } else {
                    inst.raft.sync_peer(x, out);
                }
            }
            None => inst.transfer_to = None,
        }
    }

    /// Applies committed entries in order, stopping at an undecided ganged
    /// entry.
    fn apply(&mut self, log: LogId, _now: Nanos, out: &mut Outbox, report: &mut RunReport) {
        let li = log as usize;
        self.instances[li].blocked = false;
        loop {
            let inst = &self.instances[li];
            let index = inst.raft.applied() + 1;
            if index > inst.raft.commit_index() {
                break;
            }
            let entry = inst.raft.store().entry(index).expect("committed entry in the mirror").clone();
            self.board.publish_reached(log, entry.term);
            let leader = inst.raft.is_leader();
            match &entry.body {
                EntryBody::Noop => {}
                EntryBody::Batch(reqs) => {
                    let mut replies = Vec::with_capacity(reqs.len());
                    {
                        let mut kv = self.kv.lock();
                        for p in reqs {
                            let Ok(req) = Request::decode(p) else { continue };
                            let reply = kv.apply(log, &req);
                            replies.push((req.client, req.seq, reply));
                        }
                    }
                    report.applied_requests += replies.len() as u64;
                    report.kv_ops += replies.len() as u64;
                    if leader {
                        for (c, s, r) in replies {
                            self.respond(out, log, c, s, r);
                        }
                    }
                }
                EntryBody::Gang(part) => {
                    let stamp = Arc::clone(&part.stamp);
                    let kv = self.kv.clone();
                    let cursors = Arc::clone(&self.cursors);
                    let logs = self.cfg.logs;
                    let step = self.barrier.step(&self.board, log, &stamp, |res| {
                        if res == Resolution::Success && stamp.snapshot {
                            let cut = (0..logs).map(|l| cursors[l].load(Ordering::Acquire)).collect();
                            kv.lock().capture(stamp.nonce.id(), cut);
                        }
                    });
                    let mut event = GangEvent {
                        nonce: stamp.nonce,
                        log,
                        participants: stamp.participant_mask(),
                        client: stamp.client,
                        seq: stamp.seq,
                        snapshot: stamp.snapshot,
                        applied: false,
                        response: None,
                    };
                    match step {
                        GangStep::Wait => {
                            self.instances[li].blocked = true;
                            break;
                        }
                        GangStep::Apply => {
                            if !stamp.snapshot {
                                let ops = decode_write_ops(part.section_bytes()).unwrap_or_default();
                                self.kv.lock().apply_section(log, stamp.client, stamp.seq, &ops);
                                report.kv_ops += ops.len() as u64;
                            }
                            self.barrier.consume(log);
                            report.applied_requests += 1;
                            if log == COORDINATOR {
                                self.stats.gangs_applied += 1;
                                if leader {
                                    let value =
                                        stamp.snapshot.then(|| Payload::from(&stamp.nonce.id().to_le_bytes()[..]));
                                    self.respond(
                                        out,
                                        log,
                                        stamp.client,
                                        stamp.seq,
                                        Reply { status: Status::Ok, value },
                                    );
                                    event.response = Some(Status::Ok);
                                }
                            }
                            event.applied = true;
                        }
                        GangStep::Skip { arrived } => {
                            if arrived {
                                self.barrier.consume(log);
                            }
                            if log == COORDINATOR {
                                self.stats.gangs_failed += 1;
                                if leader {
                                    self.respond(out, log, stamp.client, stamp.seq, Reply::status(Status::GangRetry));
                                    event.response = Some(Status::GangRetry);
                                }
                            }
                        }
                    }
                    self.gang_events.push(event);
                    if log == COORDINATOR {
                        let coord = &mut self.instances[li];
                        if coord.gang_in_flight == Some(stamp.nonce) {
                            coord.gang_in_flight = None;
                        }
                    }
                }
            }
            let inst = &mut self.instances[li];
            inst.raft.set_applied(index);
            inst.proposed.remove(&index);
            self.cursors[li].store(index, Ordering::Release);
        }
        if log == COORDINATOR {
            let coord = &self.instances[li];
            if coord.gang_in_flight.is_some_and(|_| !coord.raft.is_leader()) {
                self.instances[li].gang_in_flight = None;
            }
            self.dispatch_gang(_now, out);
        }
        self.serve_weak(log, out);
    }

    fn serve_weak(&mut self, log: LogId, out: &mut Outbox) {
        let inst = &mut self.instances[log as usize];
        if inst.weak.is_empty() {
            return;
        }
        let applied = inst.raft.applied();
        let (ready, waiting): (Vec<_>, Vec<_>) =
            std::mem::take(&mut inst.weak).into_iter().partition(|w| applied >= w.target);
        inst.weak = waiting;
        for w in ready {
            self.stats.weak_reads += 1;
            let reply = self.kv.lock().read(&w.key);
            self.respond(out, log, w.client, w.seq, reply);
        }
    }

    fn expire_weak(&mut self, log: LogId, now: Nanos, out: &mut Outbox) {
        let inst = &mut self.instances[log as usize];
        if inst.weak.iter().all(|w| w.deadline > now) {
            return;
        }
        let (expired, waiting): (Vec<_>, Vec<_>) =
            std::mem::take(&mut inst.weak).into_iter().partition(|w| w.deadline <= now);
        inst.weak = waiting;
        for w in expired {
            self.stats.weak_read_timeouts += 1;
            self.respond(out, log, w.client, w.seq, Reply::status(Status::Busy));
        }
    }

    /// Redirects every waiting client once the instance loses leadership.
    fn watch_role(&mut self, log: LogId, out: &mut Outbox) {
        let inst = &mut self.instances[log as usize];
        let leader = inst.raft.is_leader();
        let lost = inst.was_leader && !leader;
        inst.was_leader = leader;
        if !lost {
            return;
        }
        let mut waiting: Vec<(ClientId, u64)> = std::mem::take(&mut inst.proposed).into_values().flatten().collect();
        waiting.extend(inst.weak.drain(..).map(|w| (w.client, w.seq)));
        waiting.extend(inst.queue.drain(..).map(|(c, s, _)| (c, s)));
        waiting.extend(inst.gangs.drain(..).map(|g| (g.client, g.seq)));
        inst.gang_in_flight = None;
        inst.transfer_to = None;
        for (c, s) in waiting {
            self.redirect(out, log, c, s);
        }
    }

    /// Hash of the replica's key-value contents.
    pub fn state_hash(&self) -> u64 {
        self.kv.lock().state_hash()
    }
}
