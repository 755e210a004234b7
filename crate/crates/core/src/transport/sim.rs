//! Deterministic in-process network for the simulator.
//!
//! Packets travel as values (no serialization) with a seeded delay, loss and
//! partition model. Delivery moves a packet into the inbox of its destination
//! endpoint and log; an endpoint reads its inbox through a [`SimPort`].

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Outbox, Transport};
use crate::raft::Nanos;
use crate::request::LogId;
use crate::wire::{Addr, NodeId, Packet, DEFAULT_MTU};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Fixed one-way latency between distinct endpoints.
    pub base_delay: Nanos,
    /// Mean of the exponential jitter added to every hop.
    pub jitter_mean: Nanos,
    /// Probability a packet between nodes is lost.
    pub drop_rate: f64,
    /// Probability a packet between nodes is delivered twice.
    pub duplicate_rate: f64,
    /// Probability a packet is held back by an extra `reorder_delay`.
    pub reorder_rate: f64,
    pub reorder_delay: Nanos,
    pub mtu: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_delay: 5_000,
            jitter_mean: 1_000,
            drop_rate: 0.0,
            duplicate_rate: 0.0,
            reorder_rate: 0.0,
            reorder_delay: 50_000,
            mtu: DEFAULT_MTU,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub bytes: u64,
}

struct InFlight {
    at: Nanos,
    seq: u64,
    packet: Packet,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for InFlight {}
impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(serde::Serialize)]
struct TraceLine<'a> {
    t: Nanos,
    ev: &'a str,
    src: Addr,
    dst: Addr,
    log: LogId,
    term: u64,
    kind: String,
    len: usize,
}

pub struct SimNet {
    cfg: NetConfig,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<InFlight>>,
    seq: u64,
    inboxes: HashMap<(Addr, LogId), VecDeque<Packet>>,
    /// Partition group per node; nodes in different groups cannot talk.
    groups: HashMap<NodeId, u32>,
    down: BTreeSet<NodeId>,
    trace: Option<Box<dyn Write + Send>>,
    stats: NetStats,
}

impl std::fmt::Debug for SimNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimNet").field("in_flight", &self.queue.len()).field("stats", &self.stats).finish()
    }
}

impl SimNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Self {
        SimNet {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            seq: 0,
            inboxes: HashMap::new(),
            groups: HashMap::new(),
            down: BTreeSet::new(),
            trace: None,
            stats: NetStats::default(),
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn set_config(&mut self, cfg: NetConfig) {
        self.cfg = cfg;
    }

    /// Writes one JSON object per network event to `w`.
    pub fn set_trace(&mut self, w: Box<dyn Write + Send>) {
        self.trace = Some(w);
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    /// Splits nodes into groups; unlisted nodes form their own group 0.
    pub fn partition(&mut self, groups: &[Vec<NodeId>]) {
        self.groups.clear();
        for (g, members) in groups.iter().enumerate() {
            for &n in members {
                self.groups.insert(n, g as u32 + 1);
            }
        }
    }

    pub fn heal(&mut self) {
        self.groups.clear();
    }

    /// Marks a node crashed: its in-flight and queued traffic is discarded
    /// and nothing reaches it until [`SimNet::set_up`].
    pub fn set_down(&mut self, node: NodeId) {
        self.down.insert(node);
        self.inboxes.retain(|(a, _), _| *a != Addr::Node(node));
    }

    pub fn set_up(&mut self, node: NodeId) {
        self.down.remove(&node);
    }

    pub fn is_down(&self, node: NodeId) -> bool {
        self.down.contains(&node)
    }

    fn group(&self, a: Addr) -> Option<u32> {
        a.node().map(|n| self.groups.get(&n).copied().unwrap_or(0))
    }

    fn reachable(&self, src: Addr, dst: Addr) -> bool {
        let down = |a: Addr| a.node().is_some_and(|n| self.down.contains(&n));
        if down(src) || down(dst) {
            return false;
        }
        match (self.group(src), self.group(dst)) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }

    fn trace(&mut self, t: Nanos, ev: &str, p: &Packet) {
        if let Some(w) = self.trace.as_mut() {
            let line = TraceLine {
                t,
                ev,
                src: p.src,
                dst: p.dst,
                log: p.log,
                term: p.term,
                kind: format!("{:?}", p.msg.msg_type()),
                len: p.wire_len(),
            };
            // Tracing is best effort.
            if serde_json::to_writer(&mut *w, &line).is_ok() {
                let _ = w.write_all(b"\n");
            }
        }
    }

    fn delay(&mut self) -> Nanos {
        let u: f64 = self.rng.random::<f64>();
        let jitter = -(1.0 - u).ln() * self.cfg.jitter_mean as f64;
        let mut d = self.cfg.base_delay + jitter as Nanos;
        if self.cfg.reorder_rate > 0.0 && self.rng.random_bool(self.cfg.reorder_rate) {
            d += self.cfg.reorder_delay;
        }
        d
    }

    fn enqueue(&mut self, at: Nanos, packet: Packet) {
        self.seq += 1;
        self.queue.push(Reverse(InFlight { at, seq: self.seq, packet }));
    }

    /// Puts `p` on the wire at time `now`.
    pub fn send(&mut self, now: Nanos, p: Packet) {
        self.stats.sent += 1;
        self.stats.bytes += p.wire_len() as u64;
        self.trace(now, "send", &p);
        if !self.reachable(p.src, p.dst) {
            self.stats.dropped += 1;
            self.trace(now, "drop", &p);
            return;
        }
        let local = p.src.node().is_some() && p.src == p.dst;
        if local {
            self.enqueue(now, p);
            return;
        }
        // The receiver gets its own buffers, as it would from a real NIC.
        let p = Packet::decode(&p.encode()).expect("sim packets round-trip through the codec");
        let between_nodes = p.src.node().is_some() && p.dst.node().is_some();
        if between_nodes && self.cfg.drop_rate > 0.0 && self.rng.random_bool(self.cfg.drop_rate) {
            self.stats.dropped += 1;
            self.trace(now, "drop", &p);
            return;
        }
        if between_nodes && self.cfg.duplicate_rate > 0.0 && self.rng.random_bool(self.cfg.duplicate_rate) {
            self.stats.duplicated += 1;
            let at = now + self.delay();
            self.enqueue(at, p.clone());
        }
        let at = now + self.delay();
        self.enqueue(at, p);
    }

    pub fn send_all(&mut self, now: Nanos, out: &mut Outbox) {
        for p in out.drain() {
            self.send(now, p);
        }
    }

    /// Time of the next pending delivery.
    pub fn next_delivery(&self) -> Option<Nanos> {
        self.queue.peek().map(|Reverse(f)| f.at)
    }

    /// Moves one packet due at or before `now` into its inbox and returns its
    /// destination and log.
    pub fn deliver_next(&mut self, now: Nanos) -> Option<(Addr, LogId)> {
        loop {
            if self.queue.peek().is_none_or(|Reverse(f)| f.at > now) {
                return None;
            }
            let Reverse(f) = self.queue.pop().unwrap();
            if !self.reachable(f.packet.src, f.packet.dst) {
                self.stats.dropped += 1;
                self.trace(f.at, "drop", &f.packet);
                continue;
            }
            self.stats.delivered += 1;
            self.trace(f.at, "deliver", &f.packet);
            let key = (f.packet.dst, f.packet.log);
            self.inboxes.entry(key).or_default().push_back(f.packet);
            return Some(key);
        }
    }

    /// Packets waiting in the inbox of `(addr, log)`.
    pub fn pending(&self, addr: Addr, log: LogId) -> usize {
        self.inboxes.get(&(addr, log)).map_or(0, VecDeque::len)
    }

    pub fn take(&mut self, addr: Addr, log: LogId, max: usize) -> Vec<Packet> {
        match self.inboxes.get_mut(&(addr, log)) {
            Some(q) => {
                let n = q.len().min(max);
                q.drain(..n).collect()
            }
            None => Vec::new(),
        }
    }

    /// One endpoint's view of the network at time `now`.
    pub fn port(&mut self, addr: Addr, now: Nanos) -> SimPort<'_> {
        SimPort { net: self, addr, now }
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

pub struct SimPort<'a> {
    net: &'a mut SimNet,
    addr: Addr,
    now: Nanos,
}

impl Transport for SimPort<'_> {
    fn mtu(&self) -> usize {
        self.net.cfg.mtu
    }

    fn flush(&mut self, out: &mut Outbox) {
        self.net.send_all(self.now, out);
    }

    fn recv_batch(&mut self, log: LogId, max: usize) -> Vec<Packet> {
        self.net.take(self.addr, log, max)
    }
}
