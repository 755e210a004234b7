//! One physical log's RAFT instance.
//!
//! Handlers are synchronous and I/O free apart from the log store: they take
//! the current time and fill an [`Outbox`]. Entries are persisted before they
//! are sent (leader) and before they are acknowledged (follower). The caller
//! drives applying; this module only tracks `commit` and `applied`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entry::{EntryBody, LogEntry};
use crate::ganged::TermBoard;
use crate::medium::Medium;
use crate::nvm::{AppendClass, NvmError, RaftMeta};
use crate::request::LogId;
use crate::storage::{LogStore, StorageError};
use crate::transport::Outbox;
use crate::wire::{Addr, Message, NodeId, Packet, HEADER_LEN};

/// Nanoseconds of (simulated or real) time.
pub type Nanos = u64;
pub const MICROS: Nanos = 1_000;
pub const MILLIS: Nanos = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RaftConfig {
    pub election_min: Nanos,
    pub election_max: Nanos,
    pub heartbeat: Nanos,
    /// Most client requests chained into one entry.
    pub max_batch: usize,
    /// Chain every queued request into shared entries; when off, each request
    /// becomes its own entry.
    pub batching: bool,
    /// Most entries per AppendEntries message.
    pub max_entries_per_msg: usize,
    pub mtu: usize,
}

impl Default for RaftConfig {
    fn default() -> Self {
        RaftConfig {
            election_min: 150 * MILLIS,
            election_max: 300 * MILLIS,
            heartbeat: 50 * MILLIS,
            max_batch: 32,
            batching: true,
            max_entries_per_msg: 64,
            mtu: crate::wire::DEFAULT_MTU,
        }
    }
}

impl RaftConfig {
    /// Fast timeouts used by the failover experiment.
    pub fn failover() -> Self {
        RaftConfig {
            election_min: 40 * MILLIS,
            election_max: 80 * MILLIS,
            heartbeat: 10 * MILLIS,
            ..Default::default()
        }
    }

    /// Largest encoded entry body that still fits one AppendEntries packet.
    pub fn max_entry_body(&self) -> usize {
        self.mtu - HEADER_LEN - 26 - 20
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RaftStats {
    pub elections_started: u64,
    pub terms_led: u64,
    pub entries_appended: u64,
    pub append_bytes: u64,
    pub append_entries_sent: u64,
    /// Entries sent or acknowledged before being durable locally. Must stay 0.
    pub durability_violations: u64,
    /// Attempts to truncate a committed entry. Must stay 0.
    pub commit_truncations: u64,
    pub follower_full_nacks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposeError {
    NotLeader,
    LogFull,
    TooLarge,
}

pub struct Raft<M: Medium> {
    me: NodeId,
    log_id: LogId,
    nodes: usize,
    cfg: RaftConfig,
    role: Role,
    term: u64,
    voted_for: Option<NodeId>,
    leader: Option<NodeId>,
    store: LogStore<M>,
    commit: u64,
    applied: u64,
    next_index: Vec<u64>,
    match_index: Vec<u64>,
    votes: Vec<bool>,
    election_deadline: Nanos,
    heartbeat_due: Nanos,
    /// Last time a current leader was heard from (or this node became one).
    leader_contact: Nanos,
    rng: ChaCha8Rng,
    board: Arc<TermBoard>,
    stats: RaftStats,
}

impl<M: Medium> std::fmt::Debug for Raft<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raft")
            .field("me", &self.me)
            .field("log", &self.log_id)
            .field("role", &self.role)
            .field("term", &self.term)
            .field("commit", &self.commit)
            .field("applied", &self.applied)
            .field("last", &self.store.last_index())
            .finish()
    }
}

impl<M: Medium> Raft<M> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        me: NodeId,
        log_id: LogId,
        nodes: usize,
        store: LogStore<M>,
        cfg: RaftConfig,
        board: Arc<TermBoard>,
        seed: u64,
        now: Nanos,
    ) -> Self {
        let meta = store.raft_meta();
        let commit = store.recovered_flash_index();
        let mut r = Raft {
            me,
            log_id,
            nodes,
            cfg,
            role: Role::Follower,
            term: meta.current_term,
            voted_for: meta.voted_for.map(|v| v as NodeId),
            leader: None,
            store,
            commit,
            applied: 0,
            next_index: vec![1; nodes],
            match_index: vec![0; nodes],
            votes: vec![false; nodes],
            election_deadline: 0,
            heartbeat_due: 0,
            leader_contact: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ ((me as u64) << 32) ^ log_id as u64),
            board,
            stats: RaftStats::default(),
        };
        r.board.publish_current(log_id, r.term);
        r.reset_election(now);
        r
    }

    pub fn id(&self) -> NodeId {
        self.me
    }

    pub fn log_id(&self) -> LogId {
        self.log_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn voted_for(&self) -> Option<NodeId> {
        self.voted_for
    }

    /// Believed leader of the current term.
    pub fn leader(&self) -> Option<NodeId> {
        self.leader
    }

    /// Leader heard from within two heartbeat intervals.
    pub fn fresh_leader(&self, now: Nanos) -> Option<NodeId> {
        match self.role {
            Role::Leader => Some(self.me),
            _ => self.leader.filter(|_| now <= self.leader_contact + 2 * self.cfg.heartbeat),
        }
    }

    pub fn commit_index(&self) -> u64 {
        self.commit
    }

    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn set_applied(&mut self, index: u64) {
        debug_assert!(index <= self.commit);
        self.applied = index;
    }

    pub fn last_index(&self) -> u64 {
        self.store.last_index()
    }

    pub fn store(&self) -> &LogStore<M> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut LogStore<M> {
        &mut self.store
    }

    pub fn config(&self) -> &RaftConfig {
        &self.cfg
    }

    pub fn stats(&self) -> RaftStats {
        self.stats
    }

    pub fn match_index(&self, node: NodeId) -> u64 {
        if node == self.me {
            self.store.last_index()
        } else {
            self.match_index[node as usize]
        }
    }

    pub fn majority(&self) -> usize {
        self.nodes / 2 + 1
    }

    /// Earliest time `tick` has work to do.
    pub fn next_deadline(&self) -> Nanos {
        match self.role {
            Role::Leader => self.heartbeat_due,
            Role::Candidate => self.election_deadline.min(self.heartbeat_due),
            Role::Follower => self.election_deadline,
        }
    }

    fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes as NodeId).filter(move |&n| n != self.me)
    }

    fn reset_election(&mut self, now: Nanos) {
        let span = self.cfg.election_max.saturating_sub(self.cfg.election_min).max(1);
        self.election_deadline = now + self.cfg.election_min + self.rng.random_range(0..span);
    }

    fn persist_meta(&mut self) {
        let meta = RaftMeta { current_term: self.term, voted_for: self.voted_for.map(u64::from) };
        self.store.set_raft_meta(meta).expect("persisting raft metadata");
        self.board.publish_current(self.log_id, self.term);
    }

    fn packet(&self, dst: NodeId, msg: Message) -> Packet {
        Packet { src: Addr::Node(self.me), dst: Addr::Node(dst), log: self.log_id, term: self.term, msg }
    }

    fn send(&mut self, out: &mut Outbox, dst: NodeId, msg: Message) {
        if let Message::AppendEntries { entries, .. } = &msg {
            self.stats.append_entries_sent += 1;
            if entries.last().is_some_and(|e| e.index > self.store.last_index()) {
                self.stats.durability_violations += 1;
            }
        }
        let p = self.packet(dst, msg);
        out.send(p).expect("raft packets are sized to the mtu");
    }

    /// Timer processing: heartbeats for a leader, elections otherwise.
    pub fn tick(&mut self, now: Nanos, out: &mut Outbox) {
        match self.role {
            Role::Leader => {
                if now >= self.heartbeat_due {
                    self.broadcast(now, out);
                }
            }
            _ => {
                if now >= self.election_deadline {
                    self.start_election(now, out);
                } else if self.role == Role::Candidate && now >= self.heartbeat_due {
                    // Votes may have been lost; ask again instead of waiting
                    // for a new term.
                    self.heartbeat_due = now + self.cfg.heartbeat;
                    self.request_votes(out);
                }
            }
        }
    }

    fn request_votes(&mut self, out: &mut Outbox) {
        let msg = Message::RequestVote { last_index: self.store.last_index(), last_term: self.store.last_term() };
        let missing: Vec<NodeId> = self.peers().filter(|&p| !self.votes[p as usize]).collect();
        for p in missing {
            self.send(out, p, msg.clone());
        }
    }

    /// Becomes a candidate for the next term.
    pub fn start_election(&mut self, now: Nanos, out: &mut Outbox) {
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.me);
        self.leader = None;
        self.persist_meta();
        self.stats.elections_started += 1;
        self.votes = vec![false; self.nodes];
        self.votes[self.me as usize] = true;
        self.reset_election(now);
        if self.majority() == 1 {
            self.become_leader(now, out);
            return;
        }
        self.heartbeat_due = now + self.cfg.heartbeat;
        self.request_votes(out);
    }

    fn become_leader(&mut self, now: Nanos, out: &mut Outbox) {
        self.role = Role::Leader;
        self.leader = Some(self.me);
        self.leader_contact = now;
        self.stats.terms_led += 1;
        let last = self.store.last_index();
        self.next_index = vec![last + 1; self.nodes];
        self.match_index = vec![0; self.nodes];
        let noop = LogEntry::noop(self.term, last + 1);
        if let Err(e) = self.store.append(noop, AppendClass::Reserved) {
            // Even the reserve is exhausted: give up the term so the log can drain.
            log_full(&e);
            self.step_down(self.term, now);
            return;
        }
        self.stats.entries_appended += 1;
        self.advance_commit();
        self.broadcast(now, out);
    }

    fn step_down(&mut self, term: u64, now: Nanos) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
            self.leader = None;
            self.persist_meta();
        }
        if self.role != Role::Follower {
            self.role = Role::Follower;
            self.reset_election(now);
        }
    }

    /// Sends every follower whatever it is missing (an empty heartbeat when
    /// nothing).
    fn broadcast(&mut self, now: Nanos, out: &mut Outbox) {
        self.heartbeat_due = now + self.cfg.heartbeat;
        for p in self.peers().collect::<Vec<_>>() {
            self.send_append(p, out);
        }
    }

    fn send_append(&mut self, peer: NodeId, out: &mut Outbox) {
        let next = self.next_index[peer as usize].max(1);
        let prev_index = next - 1;
        let prev_term = self.store.term_at(prev_index).unwrap_or(0);
        let budget = self.cfg.mtu - HEADER_LEN - 26;
        let entries = self.store.slice_from(next, budget, self.cfg.max_entries_per_msg);
        if let Some(last) = entries.last() {
            self.next_index[peer as usize] = last.index + 1;
        }
        let msg = Message::AppendEntries { prev_index, prev_term, commit: self.commit, entries };
        self.send(out, peer, msg);
    }

    /// Appends `body` as a new entry and multicasts it to caught-up
    /// followers. Returns the entry's index.
    pub fn propose(
        &mut self,
        now: Nanos,
        body: EntryBody,
        class: AppendClass,
        out: &mut Outbox,
    ) -> Result<u64, ProposeError> {
        if self.role != Role::Leader {
            return Err(ProposeError::NotLeader);
        }
        let index = self.store.last_index() + 1;
        let entry = LogEntry { term: self.term, index, body };
        let len = entry.body_len();
        if len > self.cfg.max_entry_body() || len > self.store.max_entry() {
            return Err(ProposeError::TooLarge);
        }
        match self.store.append(entry.clone(), class) {
            Ok(()) => {}
            Err(StorageError::Nvm(NvmError::LogFull)) => return Err(ProposeError::LogFull),
            Err(StorageError::Nvm(NvmError::EntryTooLarge { .. })) => return Err(ProposeError::TooLarge),
            Err(e) => panic!("log append failed: {e}"),
        }
        self.stats.entries_appended += 1;
        self.stats.append_bytes += len as u64;
        let caught_up: Vec<NodeId> = self.peers().filter(|&p| self.next_index[p as usize] == index).collect();
        if !caught_up.is_empty() {
            let msg = Message::AppendEntries {
                prev_index: index - 1,
                prev_term: self.store.term_at(index - 1).unwrap_or(0),
                commit: self.commit,
                entries: vec![entry],
            };
            self.stats.append_entries_sent += caught_up.len() as u64;
            out.send_multicast(Addr::Node(self.me), &caught_up, self.log_id, self.term, &msg)
                .expect("entry sized to the mtu");
            for p in caught_up {
                self.next_index[p as usize] = index + 1;
            }
        }
        self.advance_commit();
        let _ = now;
        Ok(index)
    }

    /// Dispatches a RAFT protocol packet.
    pub fn handle(&mut self, now: Nanos, p: Packet, out: &mut Outbox) {
        let Addr::Node(src) = p.src else { return };
        if src as usize >= self.nodes || src == self.me {
            return;
        }
        match p.msg {
            Message::AppendEntries { prev_index, prev_term, commit, entries } => {
                self.on_append_entries(now, src, p.term, prev_index, prev_term, commit, entries, out)
            }
            Message::AppendResponse { success, last_index, full } => {
                self.on_append_response(now, src, p.term, success, last_index, full, out)
            }
            Message::RequestVote { last_index, last_term } => {
                self.on_request_vote(now, src, p.term, last_index, last_term, out)
            }
            Message::VoteResponse { granted } => self.on_vote_response(now, src, p.term, granted, out),
            Message::Campaign if p.term == self.term && self.role == Role::Follower && self.leader == Some(src) => {
                self.start_election(now, out);
            }
            _ => {}
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append_entries(
        &mut self,
        now: Nanos,
        src: NodeId,
        term: u64,
        prev_index: u64,
        prev_term: u64,
        leader_commit: u64,
        entries: Vec<LogEntry>,
        out: &mut Outbox,
    ) {
        if term < self.term {
            let last = self.store.last_index();
            self.send(out, src, Message::AppendResponse { success: false, last_index: last, full: false });
            return;
        }
        if term > self.term || self.role != Role::Follower {
            self.step_down(term, now);
        }
        self.leader = Some(src);
        self.leader_contact = now;
        self.reset_election(now);

        let last = self.store.last_index();
        if prev_index > last || self.store.term_at(prev_index) != Some(prev_term) {
            let hint = last.min(prev_index.saturating_sub(1));
            self.send(out, src, Message::AppendResponse { success: false, last_index: hint, full: false });
            return;
        }
        let mut matched = prev_index;
        let mut full = false;
        for e in entries {
            if e.index != matched + 1 {
                break;
            }
            match self.store.term_at(e.index) {
                Some(t) if t == e.term => {
                    matched = e.index;
                    continue;
                }
                Some(_) => {
                    if e.index <= self.commit {
                        self.stats.commit_truncations += 1;
                    }
                    self.store.truncate_from(e.index).expect("truncating conflicting suffix");
                }
                None => {}
            }
            let idx = e.index;
            let len = e.body_len() as u64;
            match self.store.append(e, AppendClass::Normal) {
                Ok(()) => {
                    self.stats.entries_appended += 1;
                    self.stats.append_bytes += len;
                    matched = idx;
                }
                Err(StorageError::Nvm(NvmError::LogFull)) => {
                    full = true;
                    self.stats.follower_full_nacks += 1;
                    break;
                }
                Err(err) => panic!("follower append failed: {err}"),
            }
        }
        let new_commit = leader_commit.min(matched);
        if new_commit > self.commit {
            self.commit = new_commit;
        }
        if matched > self.store.last_index() {
            self.stats.durability_violations += 1;
        }
        self.send(out, src, Message::AppendResponse { success: !full, last_index: matched, full });
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append_response(
        &mut self,
        now: Nanos,
        src: NodeId,
        term: u64,
        success: bool,
        last_index: u64,
        full: bool,
        out: &mut Outbox,
    ) {
        if term > self.term {
            self.step_down(term, now);
            return;
        }
        if self.role != Role::Leader || term < self.term {
            return;
        }
        let i = src as usize;
        let last = self.store.last_index();
        if success || full {
            let matched = last_index.min(last);
            self.match_index[i] = self.match_index[i].max(matched);
            if full {
                self.next_index[i] = self.match_index[i] + 1;
            } else {
                self.next_index[i] = self.next_index[i].max(matched + 1);
            }
            self.advance_commit();
            if success && self.next_index[i] <= last {
                self.send_append(src, out);
            }
        } else {
            let floor = self.match_index[i] + 1;
            self.next_index[i] = (last_index + 1).min(self.next_index[i]).max(floor);
            self.send_append(src, out);
        }
    }

    fn on_request_vote(
        &mut self,
        now: Nanos,
        src: NodeId,
        term: u64,
        last_index: u64,
        last_term: u64,
        out: &mut Outbox,
    ) {
        if term > self.term {
            self.step_down(term, now);
        }
        let up_to_date = (last_term, last_index) >= (self.store.last_term(), self.store.last_index());
        let granted =
            term == self.term && self.voted_for.is_none_or(|v| v == src) && up_to_date && self.role != Role::Leader;
        if granted && self.voted_for.is_none() {
            self.voted_for = Some(src);
            self.persist_meta();
        }
        if granted {
            self.reset_election(now);
        }
        self.send(out, src, Message::VoteResponse { granted });
    }

    fn on_vote_response(&mut self, now: Nanos, src: NodeId, term: u64, granted: bool, out: &mut Outbox) {
        if term > self.term {
            self.step_down(term, now);
            return;
        }
        if self.role != Role::Candidate || term != self.term || !granted {
            return;
        }
        self.votes[src as usize] = true;
        if self.votes.iter().filter(|v| **v).count() >= self.majority() {
            self.become_leader(now, out);
        }
    }

    fn advance_commit(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let last = self.store.last_index();
        let mut n = last;
        while n > self.commit {
            if self.store.term_at(n) == Some(self.term) {
                let count = (0..self.nodes as NodeId).filter(|&p| self.match_index(p) >= n).count();
                if count >= self.majority() {
                    self.commit = n;
                    break;
                }
            } else {
                break;
            }
            n -= 1;
        }
    }

    /// True when `node` and a majority hold every entry of the leader's log.
    pub fn replicated_to(&self, node: NodeId) -> bool {
        let last = self.store.last_index();
        self.match_index(node) >= last
            && (0..self.nodes as NodeId).filter(|&p| self.match_index(p) >= last).count() >= self.majority()
    }

    /// Pushes missing entries to `node` right away.
    pub fn sync_peer(&mut self, node: NodeId, out: &mut Outbox) {
        if self.role == Role::Leader && node != self.me && self.next_index[node as usize] <= self.store.last_index() {
            self.send_append(node, out);
        }
    }

    /// Gives up leadership by bumping the term; used when the log is full even
    /// for reserved appends.
    pub fn abdicate(&mut self, now: Nanos, out: &mut Outbox) {
        self.start_election(now, out);
    }

    /// Asks `node`'s instance of this log to start an election.
    pub fn send_campaign(&mut self, node: NodeId, out: &mut Outbox) {
        self.send(out, node, Message::Campaign);
    }
}

fn log_full(e: &StorageError) {
    debug_assert!(matches!(e, StorageError::Nvm(NvmError::LogFull)), "unexpected append failure: {e}");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::MemMedium;
    use crate::payload::Payload;
    use crate::storage::StorageConfig;

    fn node(me: NodeId, nodes: usize) -> Raft<MemMedium> {
        let cfg = StorageConfig::compact(256 << 10, 128);
        let store = LogStore::open(MemMedium::new(256 << 10), MemMedium::new(0), cfg).unwrap();
        Raft::new(me, 0, nodes, store, RaftConfig::default(), Arc::new(TermBoard::new(1)), 7, 0)
    }

    fn deliver(nodes: &mut [Raft<MemMedium>], out: &mut Outbox, now: Nanos) {
        let mut queue: Vec<Packet> = out.drain().collect();
        while !queue.is_empty() {
            let mut next = Outbox::default();
            for p in queue.drain(..) {
                let dst = p.dst.node().unwrap() as usize;
                nodes[dst].handle(now, p, &mut next);
            }
            queue = next.drain().collect();
        }
    }

    #[test]
    fn three_nodes_elect_one_leader_in_term_one() {
        let mut nodes: Vec<_> = (0..3).map(|i| node(i, 3)).collect();
        let mut out = Outbox::default();
        let first = (0..3).min_by_key(|&i| nodes[i].next_deadline()).unwrap();
        let t = nodes[first].next_deadline();
        nodes[first].tick(t, &mut out);
        deliver(&mut nodes, &mut out, t);
        let leaders: Vec<_> = nodes.iter().filter(|n| n.is_leader()).collect();
        assert_eq!(leaders.len(), 1);
        assert_eq!(leaders[0].term(), 1);
        assert_eq!(leaders[0].commit_index(), 1);
        // Followers learn the commit index from the next heartbeat.
        let l = nodes.iter().position(|n| n.is_leader()).unwrap();
        let hb = nodes[l].next_deadline();
        nodes[l].tick(hb, &mut out);
        deliver(&mut nodes, &mut out, hb);
        assert!(nodes.iter().all(|n| n.commit_index() == 1));
    }

    #[test]
    fn follower_rejects_proposals() {
        let mut n = node(0, 3);
        let mut out = Outbox::default();
        let r = n.propose(0, EntryBody::Batch(vec![Payload::from_vec(vec![1])]), AppendClass::Normal, &mut out);
        assert_eq!(r, Err(ProposeError::NotLeader));
        assert_eq!(n.last_index(), 0);
        assert!(out.is_empty());
    }

    #[test]
    fn single_node_commits_alone() {
        let mut n = node(0, 1);
        let mut out = Outbox::default();
        n.tick(n.next_deadline(), &mut out);
        assert!(n.is_leader());
        let idx =
            n.propose(0, EntryBody::Batch(vec![Payload::from_vec(vec![1])]), AppendClass::Normal, &mut out).unwrap();
        assert_eq!(n.commit_index(), idx);
        assert!(out.is_empty());
    }

    #[test]
    fn shorter_log_is_denied_vote() {
        let mut a = node(0, 3);
        let mut b = node(1, 3);
        let mut out = Outbox::default();
        a.tick(a.next_deadline(), &mut out);
        // b has a longer log from an earlier term.
        b.store_mut().append(LogEntry::noop(1, 1), AppendClass::Normal).unwrap();
        b.step_down(1, 0);
        let req = out.drain().find(|p| p.dst == Addr::Node(1)).unwrap();
        let mut resp = Outbox::default();
        b.handle(0, Packet { term: 2, ..req }, &mut resp);
        assert!(matches!(resp.packets()[0].msg, Message::VoteResponse { granted: false }));
    }
}
