//! Client library as a sans-IO state machine.
//!
//! A client keeps one request outstanding. It remembers the leader of each
//! log, follows redirects, moves to the next replica when a request times out
//! and backs off on retryable statuses. Retries reuse the request's sequence
//! number and bytes, so the replicas can recognize a re-delivered request.

use crate::ganged::COORDINATOR;
use crate::multilog::route;
use crate::payload::Payload;
use crate::raft::{Nanos, MILLIS};
use crate::request::{ClientId, LogId, Op, Request, Status};
use crate::transport::Outbox;
use crate::wire::{Addr, Message, NodeId, Packet};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub nodes: usize,
    pub logs: usize,
    /// Time to wait for a response before trying the next replica.
    pub timeout: Nanos,
    /// Wait after a retryable status, as a multiple of `timeout`.
    pub backoff_factor: u64,
    /// Transmissions per request before giving up; 0 retries forever.
    pub max_attempts: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig { nodes: 3, logs: 1, timeout: 30 * MILLIS, backoff_factor: 2, max_attempts: 0 }
    }
}

/// A finished request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub seq: u64,
    pub op: Op,
    pub status: Status,
    pub value: Option<Payload>,
    pub invoked_at: Nanos,
    pub completed_at: Nanos,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ClientStats {
    pub sent: u64,
    pub timeouts: u64,
    pub redirects: u64,
    pub retryable: u64,
    pub completed: u64,
}

#[derive(Debug)]
struct Outstanding {
    seq: u64,
    op: Op,
    log: LogId,
    request: Payload,
    target: NodeId,
    invoked_at: Nanos,
    deadline: Nanos,
    attempts: u32,
    /// Redirects followed since the last timeout or backoff.
    hops: u32,
    backing_off: bool,
}

#[derive(Debug)]
pub struct Client {
    id: ClientId,
    cfg: ClientConfig,
    next_seq: u64,
    leaders: Vec<Option<NodeId>>,
    session_terms: Vec<u64>,
    outstanding: Option<Outstanding>,
    stats: ClientStats,
}

impl Client {
    pub fn new(id: ClientId, cfg: ClientConfig) -> Self {
        Client {
            id,
            cfg,
            next_seq: 1,
            leaders: vec![None; cfg.logs],
            session_terms: vec![0; cfg.logs],
            outstanding: None,
            stats: ClientStats::default(),
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn is_idle(&self) -> bool {
        self.outstanding.is_none()
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    /// Highest term seen from the leader of `log`.
    pub fn session_term(&self, log: LogId) -> u64 {
        self.session_terms[log as usize]
    }

    pub fn leader_hint(&self, log: LogId) -> Option<NodeId> {
        self.leaders[log as usize]
    }

    /// Log that serves `op`.
    pub fn log_for(&self, op: &Op) -> LogId {
        match op.key() {
            Some(k) => route(k, self.cfg.logs),
            None => COORDINATOR,
        }
    }

    /// The outstanding operation and when it was invoked.
    pub fn pending(&self) -> Option<(&Op, Nanos)> {
        self.outstanding.as_ref().map(|o| (&o.op, o.invoked_at))
    }

    /// Deadline of the outstanding request, if any.
    pub fn next_deadline(&self) -> Option<Nanos> {
        self.outstanding.as_ref().map(|o| o.deadline)
    }

    /// Issues `op`. Panics if a request is already outstanding.
    pub fn submit(&mut self, now: Nanos, op: Op, out: &mut Outbox) -> u64 {
        assert!(self.outstanding.is_none(), "one request at a time");
        let seq = self.next_seq;
        self.next_seq += 1;
        let log = self.log_for(&op);
        let request = Request { client: self.id, seq, op: op.clone() }.encode();
        let target = self.leaders[log as usize].unwrap_or((self.id as usize % self.cfg.nodes) as NodeId);
        self.outstanding = Some(Outstanding {
            seq,
            op,
            log,
            request,
            target,
            invoked_at: now,
            deadline: 0,
            attempts: 0,
            hops: 0,
            backing_off: false,
        });
        self.transmit(now, out);
        seq
    }

    fn transmit(&mut self, now: Nanos, out: &mut Outbox) {
        let o = self.outstanding.as_mut().expect("outstanding request");
        o.attempts += 1;
        o.backing_off = false;
        o.deadline = now + self.cfg.timeout;
        self.stats.sent += 1;
        let p = Packet {
            src: Addr::Client(self.id),
            dst: Addr::Node(o.target),
            log: o.log,
            term: self.session_terms[o.log as usize],
            msg: Message::ClientRequest { request: o.request.clone() },
        };
        // Oversized requests are rejected before they reach the network.
        if out.send(p).is_err() {
            o.deadline = Nanos::MAX;
        }
    }

    fn next_replica(&mut self) {
        let nodes = self.cfg.nodes as NodeId;
        let o = self.outstanding.as_mut().unwrap();
        o.target = (o.target + 1) % nodes;
        self.leaders[o.log as usize] = None;
    }

    /// Retransmits after a timeout or backoff. Returns the request if its
    /// retry budget is exhausted.
    pub fn tick(&mut self, now: Nanos, out: &mut Outbox) -> Option<Completion> {
        let o = self.outstanding.as_mut()?;
        if now < o.deadline {
            return None;
        }
        if self.cfg.max_attempts > 0 && o.attempts >= self.cfg.max_attempts {
            let o = self.outstanding.take().unwrap();
            self.stats.completed += 1;
            return Some(Completion {
                seq: o.seq,
                op: o.op,
                status: Status::Unavailable,
                value: None,
                invoked_at: o.invoked_at,
                completed_at: now,
                attempts: o.attempts,
            });
        }
        o.hops = 0;
        if o.backing_off {
            // Backoff finished; retry the same replica.
            o.backing_off = false;
        } else {
            self.stats.timeouts += 1;
            self.next_replica();
        }
        self.transmit(now, out);
        None
    }

    fn backoff(&mut self, now: Nanos) {
        let o = self.outstanding.as_mut().unwrap();
        o.backing_off = true;
        o.deadline = now + self.cfg.timeout * self.cfg.backoff_factor;
    }

    /// Processes a packet from a replica; returns the finished request, if
    /// this packet finished it.
    pub fn handle(&mut self, now: Nanos, p: Packet, out: &mut Outbox) -> Option<Completion> {
        let Addr::Node(src) = p.src else { return None };
        let o = self.outstanding.as_ref()?;
        let log = o.log;
        match p.msg {
            Message::ClientResponse { seq, status, value } if seq == o.seq && p.log == log => {
                let li = log as usize;
                self.session_terms[li] = self.session_terms[li].max(p.term);
                match status {
                    s if s.is_final() => {
                        self.leaders[li] = Some(src);
                        let o = self.outstanding.take().unwrap();
                        self.stats.completed += 1;
                        Some(Completion {
                            seq,
                            op: o.op,
                            status,
                            value,
                            invoked_at: o.invoked_at,
                            completed_at: now,
                            attempts: o.attempts,
                        })
                    }
                    s if s.is_retryable() => {
                        self.leaders[li] = Some(src);
                        self.stats.retryable += 1;
                        self.backoff(now);
                        None
                    }
                    _ => {
                        // NotLeader or StaleLeader: look elsewhere.
                        self.next_replica();
                        self.transmit(now, out);
                        None
                    }
                }
            }
            Message::Redirect { seq, leader } if seq == o.seq && p.log == log => {
                self.stats.redirects += 1;
                let nodes = self.cfg.nodes as NodeId;
                let o = self.outstanding.as_mut().unwrap();
                o.hops += 1;
                if o.hops > 2 * self.cfg.nodes as u32 {
                    // Replicas disagree about the leader; wait for an election.
                    self.backoff(now);
                    return None;
                }
                match leader.filter(|&l| l < nodes && l != src) {
                    Some(l) => {
                        o.target = l;
                        self.leaders[log as usize] = Some(l);
                    }
                    None => self.next_replica(),
                }
                self.transmit(now, out);
                None
            }
            _ => None,
        }
    }
}
