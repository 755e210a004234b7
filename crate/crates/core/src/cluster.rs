//! Deterministic discrete-event simulation of a whole deployment: replica
//! processes, closed-loop clients and the network, in virtual time.
//!
//! Every log instance is modeled as its own core. Running an instance costs
//! virtual CPU time according to a [`CostModel`]; packets it emits leave when
//! the run finishes. Applies on a node also contend for the node's shared
//! key-value store. A [`Monitor`] checks the consensus safety properties after
//! every instance run.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::client::{Client, ClientConfig, Completion};
use crate::ganged::Nonce;
use crate::kv::{KvStore, SharedKv};
use crate::medium::{Medium, MemMedium};
use crate::multilog::{GangEvent, Server, ServerConfig};
use crate::raft::{Nanos, Raft, MILLIS};
use crate::request::{ClientId, LogId, Op, Status};
use crate::storage::StorageConfig;
use crate::transport::sim::{NetConfig, SimNet};
use crate::transport::{Outbox, RECV_BURST};
use crate::wire::{Addr, NodeId};

/// Virtual CPU cost of the work done by one instance run, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub per_run: Nanos,
    pub per_recv: Nanos,
    /// Per destination of every packet leaving the node.
    pub per_send: Nanos,
    pub per_append: Nanos,
    pub per_request: Nanos,
    /// Charged on the node's shared store.
    pub per_kv_op: Nanos,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { per_run: 200, per_recv: 500, per_send: 1_000, per_append: 2_000, per_request: 200, per_kv_op: 50 }
    }
}

/// Source of client operations.
pub trait Workload {
    /// Next operation for `client`, or `None` when the client is done.
    fn next_op(&mut self, client: ClientId, now: Nanos, rng: &mut ChaCha8Rng) -> Option<Op>;
}

impl<F: FnMut(ClientId, Nanos, &mut ChaCha8Rng) -> Option<Op>> Workload for F {
    fn next_op(&mut self, client: ClientId, now: Nanos, rng: &mut ChaCha8Rng) -> Option<Op> {
        self(client, now, rng)
    }
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub logs: usize,
    pub server: ServerConfig,
    pub storage: StorageConfig,
    pub net: NetConfig,
    pub cost: CostModel,
    pub client: ClientConfig,
    pub clients: usize,
    pub seed: u64,
    /// Record every applied update per key on every replica.
    pub journal: bool,
    /// Keep every client operation for the history checkers.
    pub record_history: bool,
    /// Events between full log-matching sweeps; 0 disables periodic sweeps.
    pub check_interval: u64,
    /// Clients start issuing operations at this time.
    pub client_start: Nanos,
    /// Pause between a completion and the client's next operation.
    pub think_time: Nanos,
}

impl ClusterConfig {
    pub fn new(nodes: usize, logs: usize, seed: u64) -> Self {
        ClusterConfig {
            nodes,
            logs,
            server: ServerConfig { nodes, logs, ..Default::default() },
            storage: StorageConfig::compact(1 << 20, 1024),
            net: NetConfig::default(),
            cost: CostModel::default(),
            client: ClientConfig { nodes, logs, ..Default::default() },
            clients: 0,
            seed,
            journal: false,
            record_history: false,
            check_interval: 0,
            client_start: 0,
            think_time: 0,
        }
    }

    fn normalized(mut self) -> Self {
        self.server.nodes = self.nodes;
        self.server.logs = self.logs;
        self.client.nodes = self.nodes;
        self.client.logs = self.logs;
        self
    }
}

/// One finished client operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub client: ClientId,
    pub seq: u64,
    pub op: Op,
    pub status: Status,
    pub value: Option<Vec<u8>>,
    pub invoked_at: Nanos,
    pub completed_at: Nanos,
    pub attempts: u32,
}

impl OpRecord {
    fn from_completion(client: ClientId, c: Completion) -> Self {
        OpRecord {
            client,
            seq: c.seq,
            op: c.op,
            status: c.status,
            value: c.value.map(|v| v.to_vec()),
            invoked_at: c.invoked_at,
            completed_at: c.completed_at,
            attempts: c.attempts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Wake {
    Instance(NodeId, LogId),
    Client(u32),
}

struct SimNode {
    server: Option<Server<MemMedium>>,
    media: Vec<(MemMedium, MemMedium)>,
    busy: Vec<Nanos>,
    scheduled: Vec<Nanos>,
    kv_busy: Nanos,
    incarnation: u32,
    /// Virtual CPU consumed per log instance.
    cpu: Vec<Nanos>,
}

struct SimClient {
    client: Client,
    scheduled: Nanos,
    done: bool,
    started: bool,
}

/// Safety properties checked while a trace runs.
#[derive(Debug, Default)]
pub struct Monitor {
    leaders: HashMap<(LogId, u64), NodeId>,
    /// Globally committed `(term, digest)` per log, by index - 1.
    committed: Vec<Vec<(u64, u64)>>,
    watermark: HashMap<(NodeId, LogId), u64>,
    led: HashMap<(NodeId, LogId), u64>,
    gangs: BTreeMap<(NodeId, u32, Nonce), GangTally>,
    gang_responses: HashMap<Nonce, Vec<Status>>,
    pub violations: Vec<String>,
    pub elections: u64,
    pub matching_checks: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct GangTally {
    participants: u64,
    applied: u64,
    skipped: u64,
    client: ClientId,
    seq: u64,
}

/// Outcome of one ganged operation at one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GangOutcome {
    Applied,
    Failed,
    Partial,
    Undecided,
}

impl Monitor {
    fn new(logs: usize) -> Self {
        Monitor { committed: vec![Vec::new(); logs], ..Default::default() }
    }

    fn violation(&mut self, msg: String) {
        if self.violations.len() < 64 {
            self.violations.push(msg);
        }
    }

    fn observe<M: Medium>(&mut self, node: NodeId, raft: &Raft<M>) {
        let log = raft.log_id();
        let term = raft.term();
        if raft.is_leader() {
            let holder = *self.leaders.entry((log, term)).or_insert(node);
            if holder != node {
                self.violation(format!("election safety: log {log} term {term} led by n{holder} and n{node}"));
            }
            if self.led.get(&(node, log)) != Some(&term) {
                self.led.insert((node, log), term);
                self.elections += 1;
                self.check_completeness(node, raft);
            }
        }
        let stats = raft.stats();
        if stats.durability_violations > 0 {
            self.violation(format!("n{node} log {log}: {} sends before persist", stats.durability_violations));
        }
        if stats.commit_truncations > 0 {
            self.violation(format!("n{node} log {log}: committed entry truncated"));
        }
        let from = self.watermark.get(&(node, log)).copied().unwrap_or(0);
        let commit = raft.commit_index();
        for i in from + 1..=commit {
            let Some(e) = raft.store().entry(i) else {
                self.violation(format!("n{node} log {log}: commit {commit} beyond log end"));
                break;
            };
            let mark = (e.term, e.digest());
            let global = &mut self.committed[log as usize];
            if (i as usize) <= global.len() {
                if global[i as usize - 1] != mark {
                    self.violation(format!("commit irrevocability: log {log} index {i} differs at n{node}"));
                }
            } else {
                global.push(mark);
            }
        }
        self.watermark.insert((node, log), commit);
    }

    fn check_completeness<M: Medium>(&mut self, node: NodeId, raft: &Raft<M>) {
        let log = raft.log_id();
        let global = &self.committed[log as usize];
        let mut missing = None;
        for (i, mark) in global.iter().enumerate() {
            match raft.store().entry(i as u64 + 1) {
                Some(e) if (e.term, e.digest()) == *mark => {}
                _ => {
                    missing = Some(i + 1);
                    break;
                }
            }
        }
        if let Some(i) = missing {
            self.violation(format!(
                "leader completeness: n{node} leads log {log} term {} without committed index {i}",
                raft.term()
            ));
        }
    }

    fn reset_node(&mut self, node: NodeId) {
        self.watermark.retain(|(n, _), _| *n != node);
        self.led.retain(|(n, _), _| *n != node);
    }

    fn record_gangs(&mut self, node: NodeId, incarnation: u32, events: Vec<GangEvent>) {
        for ev in events {
            let t = self.gangs.entry((node, incarnation, ev.nonce)).or_default();
            t.participants = ev.participants;
            t.client = ev.client;
            t.seq = ev.seq;
            let bit = 1u64 << ev.log;
            if ev.applied {
                t.applied |= bit;
            } else {
                t.skipped |= bit;
            }
            if t.applied != 0 && t.skipped != 0 {
                let nonce = ev.nonce;
                self.violation(format!("ganged atomicity: {nonce:?} partly applied at n{node}"));
            }
            if let Some(s) = ev.response {
                self.gang_responses.entry(ev.nonce).or_default().push(s);
            }
        }
    }

    /// Outcome of every ganged operation seen at every replica incarnation.
    pub fn gang_outcomes(&self) -> BTreeMap<Nonce, Vec<(NodeId, u32, GangOutcome)>> {
        let mut out: BTreeMap<Nonce, Vec<_>> = BTreeMap::new();
        for ((node, inc, nonce), t) in &self.gangs {
            // Participants that never received their part report nothing,
            // so a failed gang may be skipped at only some of its logs.
            let o = if t.applied != 0 && t.skipped != 0 {
                GangOutcome::Partial
            } else if t.skipped != 0 {
                GangOutcome::Failed
            } else if t.applied == t.participants {
                GangOutcome::Applied
            } else {
                GangOutcome::Undecided
            };
            out.entry(*nonce).or_default().push((*node, *inc, o));
        }
        out
    }

    /// Statuses replicas sent to clients for a ganged operation.
    pub fn gang_responses(&self, nonce: Nonce) -> &[Status] {
        self.gang_responses.get(&nonce).map_or(&[], Vec::as_slice)
    }

    /// `(client, seq)` of a ganged operation.
    pub fn gang_request(&self, nonce: Nonce) -> Option<(ClientId, u64)> {
        self.gangs.iter().find(|((_, _, n), _)| *n == nonce).map(|(_, t)| (t.client, t.seq))
    }

    pub fn committed_len(&self, log: LogId) -> usize {
        self.committed[log as usize].len()
    }
}

pub struct Cluster {
    cfg: ClusterConfig,
    now: Nanos,
    net: SimNet,
    nodes: Vec<SimNode>,
    clients: Vec<SimClient>,
    workload: Box<dyn Workload>,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Reverse<(Nanos, u64, Wake)>>,
    seq: u64,
    events: u64,
    issuing: bool,
    pub monitor: Monitor,
    history: Vec<OpRecord>,
    /// `(completed_at, latency)` of every finished operation.
    completions: Vec<(Nanos, Nanos)>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster").field("now", &self.now).field("events", &self.events).finish()
    }
}

impl Cluster {
    pub fn new(cfg: ClusterConfig, workload: Box<dyn Workload>) -> Self {
        let cfg = cfg.normalized();
        let net = SimNet::new(cfg.net, cfg.seed ^ 0x6e65_7477_6f72_6b00);
        let mut c = Cluster {
            now: 0,
            net,
            nodes: Vec::new(),
            clients: Vec::new(),
            workload,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x636c_6965_6e74),
            heap: BinaryHeap::new(),
            seq: 0,
            events: 0,
            issuing: true,
            monitor: Monitor::new(cfg.logs),
            history: Vec::new(),
            completions: Vec::new(),
            cfg,
        };
        for n in 0..c.cfg.nodes {
            let media =
                (0..c.cfg.logs).map(|_| (MemMedium::new(c.cfg.storage.nvm.region_bytes), MemMedium::new(0))).collect();
            c.nodes.push(SimNode {
                server: None,
                media,
                busy: vec![0; c.cfg.logs],
                scheduled: vec![Nanos::MAX; c.cfg.logs],
                kv_busy: 0,
                incarnation: 0,
                cpu: vec![0; c.cfg.logs],
            });
            c.boot(n as NodeId);
        }
        for i in 0..c.cfg.clients {
            let id = i as ClientId + 1;
            c.clients.push(SimClient {
                client: Client::new(id, c.cfg.client),
                scheduled: Nanos::MAX,
                done: false,
                started: false,
            });
            let start = c.cfg.client_start;
            c.schedule(start, Wake::Client(i as u32));
        }
        c
    }

    fn boot(&mut self, n: NodeId) {
        let node = &mut self.nodes[n as usize];
        let kv = SharedKv::new(if self.cfg.journal { KvStore::with_journal() } else { KvStore::new() });
        let seed = self.cfg.seed.wrapping_mul(31).wrapping_add(node.incarnation as u64 * 7919);
        let server = Server::open(n, self.cfg.server, self.cfg.storage, node.media.clone(), kv, seed, self.now)
            .expect("recovering replica storage");
        node.server = Some(server);
        for l in 0..self.cfg.logs {
            node.busy[l] = self.now;
            node.scheduled[l] = Nanos::MAX;
        }
        for l in 0..self.cfg.logs as LogId {
            self.schedule(self.now, Wake::Instance(n, l));
        }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn net(&mut self) -> &mut SimNet {
        &mut self.net
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn server(&self, n: NodeId) -> Option<&Server<MemMedium>> {
        self.nodes[n as usize].server.as_ref()
    }

    /// Number of restarts of node `n`.
    pub fn incarnation(&self, n: NodeId) -> u32 {
        self.nodes[n as usize].incarnation
    }

    pub fn is_up(&self, n: NodeId) -> bool {
        self.nodes[n as usize].server.is_some()
    }

    pub fn history(&self) -> &[OpRecord] {
        &self.history
    }

    pub fn completions(&self) -> &[(Nanos, Nanos)] {
        &self.completions
    }

    /// Virtual CPU consumed by each instance of node `n`.
    pub fn cpu(&self, n: NodeId) -> &[Nanos] {
        &self.nodes[n as usize].cpu
    }

    pub fn clients(&self) -> impl Iterator<Item = &Client> {
        self.clients.iter().map(|c| &c.client)
    }

    /// Operations still outstanding: `(client, op, invoked_at)`.
    pub fn pending_ops(&self) -> Vec<(ClientId, Op, Nanos)> {
        self.clients.iter().filter_map(|c| c.client.pending().map(|(op, t)| (c.client.id(), op.clone(), t))).collect()
    }

    /// Stops handing out new operations; outstanding ones still finish.
    pub fn stop_clients(&mut self) {
        self.issuing = false;
    }

    fn schedule(&mut self, at: Nanos, w: Wake) {
        let slot = match w {
            Wake::Instance(n, l) => &mut self.nodes[n as usize].scheduled[l as usize],
            Wake::Client(c) => &mut self.clients[c as usize].scheduled,
        };
        if at < *slot {
            *slot = at;
            self.seq += 1;
            self.heap.push(Reverse((at, self.seq, w)));
        }
    }

    /// Node currently leading `log` with the highest term.
    pub fn leader_of(&self, log: LogId) -> Option<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.server.as_ref().map(|s| (i, s.raft(log))))
            .filter(|(_, r)| r.is_leader())
            .max_by_key(|(_, r)| r.term())
            .map(|(i, _)| i as NodeId)
    }

    /// Power-fails node `n`: volatile state and unpersisted writes are lost.
    pub fn crash(&mut self, n: NodeId) {
        let node = &mut self.nodes[n as usize];
        if node.server.take().is_none() {
            return;
        }
        for (nvm, flash) in &node.media {
            nvm.crash();
            flash.crash();
        }
        node.scheduled = vec![Nanos::MAX; self.cfg.logs];
        self.net.set_down(n);
        self.monitor.reset_node(n);
    }

    /// Restarts a crashed node from its durable media.
    pub fn restart(&mut self, n: NodeId) {
        if self.nodes[n as usize].server.is_some() {
            return;
        }
        self.nodes[n as usize].incarnation += 1;
        self.net.set_up(n);
        self.boot(n);
    }

    /// Processes one event; false when nothing is left to do.
    pub fn step(&mut self) -> bool {
        let t_net = self.net.next_delivery();
        let t_heap = self.heap.peek().map(|Reverse((t, _, _))| *t);
        match (t_net, t_heap) {
            (None, None) => false,
            (Some(a), b) if b.is_none_or(|b| a <= b) => {
                self.now = self.now.max(a);
                if let Some((addr, log)) = self.net.deliver_next(a) {
                    self.on_delivery(addr, log);
                }
                true
            }
            _ => {
                let Reverse((t, _, w)) = self.heap.pop().unwrap();
                let slot = match w {
                    Wake::Instance(n, l) => &mut self.nodes[n as usize].scheduled[l as usize],
                    Wake::Client(c) => &mut self.clients[c as usize].scheduled,
                };
                if *slot != t {
                    return true;
                }
                *slot = Nanos::MAX;
                self.now = self.now.max(t);
                self.events += 1;
                match w {
                    Wake::Instance(n, l) => self.run_instance(n, l),
                    Wake::Client(c) => self.run_client(c),
                }
                if self.cfg.check_interval > 0 && self.events.is_multiple_of(self.cfg.check_interval) {
                    self.check_log_matching();
                }
                true
            }
        }
    }

    /// Runs every event up to and including time `t`.
    pub fn run_until(&mut self, t: Nanos) {
        loop {
            let next = match (self.net.next_delivery(), self.heap.peek().map(|Reverse((t, _, _))| *t)) {
                (None, None) => break,
                (a, b) => a.unwrap_or(Nanos::MAX).min(b.unwrap_or(Nanos::MAX)),
            };
            if next > t {
                break;
            }
            self.step();
        }
        self.now = self.now.max(t);
    }

    pub fn run_for(&mut self, d: Nanos) {
        let t = self.now + d;
        self.run_until(t);
    }

    fn on_delivery(&mut self, addr: Addr, log: LogId) {
        match addr {
            Addr::Node(n) => {
                if self.nodes[n as usize].server.is_none() {
                    self.net.take(addr, log, usize::MAX);
                    return;
                }
                let at = self.now.max(self.nodes[n as usize].busy[log as usize]);
                self.schedule(at, Wake::Instance(n, log));
            }
            Addr::Client(id) => {
                let ci = id as usize - 1;
                let packets = self.net.take(addr, log, usize::MAX);
                let mut out = Outbox::new(self.cfg.net.mtu);
                for p in packets {
                    if let Some(done) = self.clients[ci].client.handle(self.now, p, &mut out) {
                        self.finish(ci, done, &mut out);
                    }
                }
                self.net.send_all(self.now, &mut out);
                self.reschedule_client(ci);
            }
        }
    }

    fn finish(&mut self, ci: usize, done: Completion, out: &mut Outbox) {
        let id = self.clients[ci].client.id();
        self.completions.push((done.completed_at, done.completed_at - done.invoked_at));
        if self.cfg.record_history {
            self.history.push(OpRecord::from_completion(id, done));
        }
        if self.cfg.think_time == 0 {
            self.issue(ci, out);
        } else {
            let at = self.now + self.cfg.think_time;
            self.schedule(at, Wake::Client(ci as u32));
        }
    }

    fn issue(&mut self, ci: usize, out: &mut Outbox) {
        let sc = &mut self.clients[ci];
        if sc.done || !self.issuing || !sc.client.is_idle() {
            return;
        }
        match self.workload.next_op(sc.client.id(), self.now, &mut self.rng) {
            Some(op) => {
                sc.client.submit(self.now, op, out);
            }
            None => sc.done = true,
        }
    }

    fn reschedule_client(&mut self, ci: usize) {
        if let Some(d) = self.clients[ci].client.next_deadline() {
            self.schedule(d.max(self.now), Wake::Client(ci as u32));
        }
    }

    fn run_client(&mut self, c: u32) {
        let ci = c as usize;
        let mut out = Outbox::new(self.cfg.net.mtu);
        if !self.clients[ci].started || self.clients[ci].client.is_idle() {
            self.clients[ci].started = true;
            self.issue(ci, &mut out);
        } else if let Some(done) = self.clients[ci].client.tick(self.now, &mut out) {
            self.finish(ci, done, &mut out);
        }
        self.net.send_all(self.now, &mut out);
        self.reschedule_client(ci);
    }

    fn run_instance(&mut self, n: NodeId, log: LogId) {
        let now = self.now;
        let cost = self.cfg.cost;
        let packets = self.net.take(Addr::Node(n), log, RECV_BURST);
        let node = &mut self.nodes[n as usize];
        let Some(server) = node.server.as_mut() else { return };
        let applied_before = server.raft(log).applied();
        let activations_before = server.barrier().activations();
        let mut out = Outbox::new(self.cfg.net.mtu);
        let report = server.run_instance(log, now, packets, &mut out);
        let progressed = report.received > 0
            || server.raft(log).applied() != applied_before
            || server.barrier().activations() != activations_before;

        let sends: u64 = out.packets().iter().filter(|p| p.dst != Addr::Node(n)).count() as u64;
        let cpu = cost.per_run
            + cost.per_recv * report.received as u64
            + cost.per_send * sends
            + cost.per_append * report.appended
            + cost.per_request * report.applied_requests;
        let mut finish = now + cpu;
        if report.kv_ops > 0 {
            let start = finish.max(node.kv_busy);
            node.kv_busy = start + cost.per_kv_op * report.kv_ops;
            finish = node.kv_busy;
        }
        node.busy[log as usize] = finish;
        node.cpu[log as usize] += finish - now;

        let incarnation = node.incarnation;
        let events = server.take_gang_events();
        self.monitor.observe(n, server.raft(log));
        self.monitor.record_gangs(n, incarnation, events);
        let deadline = server.next_deadline(log);
        let blocked: Vec<LogId> = if progressed {
            (0..self.cfg.logs as LogId).filter(|&l| l != log && server.is_blocked(l)).collect()
        } else {
            Vec::new()
        };
        self.net.send_all(finish, &mut out);

        if self.net.pending(Addr::Node(n), log) > 0 {
            self.schedule(finish, Wake::Instance(n, log));
        } else {
            self.schedule(finish.max(deadline), Wake::Instance(n, log));
        }
        for l in blocked {
            let at = finish.max(self.nodes[n as usize].busy[l as usize]);
            self.schedule(at, Wake::Instance(n, l));
        }
    }

    /// Compares every pair of live replicas' logs at the largest index where
    /// their terms agree: the prefixes up to there must be identical.
    pub fn check_log_matching(&mut self) {
        self.monitor.matching_checks += 1;
        for log in 0..self.cfg.logs as LogId {
            let live: Vec<(NodeId, &Raft<MemMedium>)> = self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.server.as_ref().map(|s| (i as NodeId, s.raft(log))))
                .collect();
            let mut found = Vec::new();
            for (i, (na, a)) in live.iter().enumerate() {
                for (nb, b) in &live[i + 1..] {
                    let (sa, sb) = (a.store(), b.store());
                    let mut idx = sa.last_index().min(sb.last_index());
                    while idx > 0 && sa.term_at(idx) != sb.term_at(idx) {
                        idx -= 1;
                    }
                    if sa.chain_at(idx) != sb.chain_at(idx) {
                        found.push(format!("log matching: log {log} n{na}/n{nb} differ at or before index {idx}"));
                    }
                }
            }
            for v in found {
                self.monitor.violation(v);
            }
        }
    }

    /// True once clients are idle and every live replica holds and has
    /// applied the same log as the leader of each log.
    pub fn is_quiet(&self) -> bool {
        if self.clients.iter().any(|c| !c.client.is_idle()) {
            return false;
        }
        (0..self.cfg.logs as LogId).all(|log| {
            let Some(l) = self.leader_of(log) else { return false };
            let lr = self.nodes[l as usize].server.as_ref().unwrap().raft(log);
            let last = lr.last_index();
            self.nodes.iter().filter_map(|n| n.server.as_ref()).all(|s| {
                let r = s.raft(log);
                r.last_index() == last && r.commit_index() == last && r.applied() == last && !s.is_blocked(log)
            })
        })
    }

    /// Stops new client operations, heals the network and runs until the
    /// deployment is quiet. Returns false if it did not settle within
    /// `limit` of virtual time.
    pub fn quiesce(&mut self, limit: Nanos) -> bool {
        self.stop_clients();
        self.net.heal();
        let mut cfg = *self.net.config();
        cfg.drop_rate = 0.0;
        cfg.duplicate_rate = 0.0;
        cfg.reorder_rate = 0.0;
        self.net.set_config(cfg);
        let end = self.now + limit;
        while self.now < end {
            self.run_for(5 * MILLIS);
            if self.is_quiet() {
                // One more heartbeat round so followers learn the final commit.
                let hb = self.cfg.server.raft.heartbeat;
                self.run_for(2 * hb);
                if self.is_quiet() {
                    self.check_log_matching();
                    return true;
                }
            }
        }
        self.check_log_matching();
        false
    }

    /// Store hash of every live replica.
    pub fn state_hashes(&self) -> Vec<(NodeId, u64)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.server.as_ref().map(|s| (i as NodeId, s.state_hash())))
            .collect()
    }

    /// Per-key journals of every live replica (journaling must be on).
    pub fn journals(&self) -> Vec<(NodeId, crate::kv::Journal)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let s = n.server.as_ref()?;
                let kv = s.kv().lock();
                Some((i as NodeId, kv.journal()?.clone()))
            })
            .collect()
    }

    /// Blocked instances of live replicas that still have committed entries
    /// to apply.
    pub fn stuck_instances(&self) -> Vec<(NodeId, LogId)> {
        let mut v = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(s) = n.server.as_ref() {
                for l in 0..self.cfg.logs as LogId {
                    if s.is_blocked(l) {
                        v.push((i as NodeId, l));
                    }
                }
            }
        }
        v
    }
}
