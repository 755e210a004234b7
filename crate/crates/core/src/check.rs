//! History checkers for the key-value interface.
//!
//! [`linearizable`] decides whether a single-key history of quorum reads and
//! writes can be explained by a sequential register, using the
//! Wing-Gong search with Lowe's memoization. [`check_weak_reads`] checks weak
//! reads against the per-key journal of an applying replica.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::cluster::OpRecord;
use crate::kv::{Journal, JournalRecord};
use crate::raft::Nanos;
use crate::request::{ClientId, Op, Status};

/// A register operation with its observed outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegOp {
    /// Read returning the value, `None` for not found.
    Read(Option<Vec<u8>>),
    Write(Vec<u8>),
    /// Delete; `existed` is what the replica reported.
    Delete {
        existed: bool,
    },
    /// Write whose outcome is unknown; it may or may not have taken effect.
    MaybeWrite(Option<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timed {
    pub op: RegOp,
    pub call: Nanos,
    /// `None` while the outcome is unknown.
    pub ret: Option<Nanos>,
}

/// Splits a client history into per-key register histories. Operations that
/// certainly had no effect are dropped, as are weak reads and reads whose
/// outcome is unknown. `pending` lists operations that never completed.
pub fn per_key(history: &[OpRecord], pending: &[(Op, Nanos)]) -> BTreeMap<Vec<u8>, Vec<Timed>> {
    let mut keys: BTreeMap<Vec<u8>, Vec<Timed>> = BTreeMap::new();
    let unknown = |op: &Op, call: Nanos| -> Option<(Vec<u8>, Timed)> {
        let (key, effect) = match op {
            Op::Put { key, value } => (key, Some(value.clone())),
            Op::Delete { key } => (key, None),
            _ => return None,
        };
        Some((key.clone(), Timed { op: RegOp::MaybeWrite(effect), call, ret: None }))
    };
    for r in history {
        let entry = match (&r.op, r.status) {
            (op, Status::Unavailable) => unknown(op, r.invoked_at),
            (Op::Get { key }, Status::Ok) => Some((
                key.clone(),
                Timed { op: RegOp::Read(r.value.clone()), call: r.invoked_at, ret: Some(r.completed_at) },
            )),
            (Op::Get { key }, Status::NotFound) => {
                Some((key.clone(), Timed { op: RegOp::Read(None), call: r.invoked_at, ret: Some(r.completed_at) }))
            }
            (Op::Put { key, value }, Status::Ok) => Some((
                key.clone(),
                Timed { op: RegOp::Write(value.clone()), call: r.invoked_at, ret: Some(r.completed_at) },
            )),
            (Op::Delete { key }, s @ (Status::Ok | Status::NotFound)) => Some((
                key.clone(),
                Timed { op: RegOp::Delete { existed: s == Status::Ok }, call: r.invoked_at, ret: Some(r.completed_at) },
            )),
            _ => None,
        };
        if let Some((k, t)) = entry {
            keys.entry(k).or_default().push(t);
        }
    }
    for (op, call) in pending {
        if let Some((k, t)) = unknown(op, *call) {
            keys.entry(k).or_default().push(t);
        }
    }
    keys
}

/// Sequential register step. Returns the next state if `op` may legally
/// observe `state`.
fn step(op: &RegOp, state: &Option<Vec<u8>>) -> Option<Option<Vec<u8>>> {
    match op {
        RegOp::Read(v) => (v == state).then(|| state.clone()),
        RegOp::Write(v) => Some(Some(v.clone())),
        RegOp::Delete { existed } => (*existed == state.is_some()).then_some(None),
        RegOp::MaybeWrite(v) => Some(v.clone()),
    }
}

#[derive(Clone, Copy)]
struct Event {
    op: usize,
    is_call: bool,
    prev: usize,
    next: usize,
}

/// True when `ops`, starting from `initial`, are linearizable as a register.
pub fn linearizable(ops: &[Timed], initial: Option<Vec<u8>>) -> bool {
    let n = ops.len();
    if n == 0 {
        return true;
    }
    // Event list with a sentinel head at position 0 and a tail at the end.
    let mut order: Vec<(Nanos, u8, usize, bool)> = Vec::with_capacity(2 * n);
    for (i, t) in ops.iter().enumerate() {
        order.push((t.call, 0, i, true));
        order.push((t.ret.unwrap_or(Nanos::MAX), 1, i, false));
    }
    // Calls sort before returns at the same instant, so such pairs overlap.
    order.sort();
    let len = order.len() + 2;
    let tail = len - 1;
    let mut ev = vec![Event { op: usize::MAX, is_call: false, prev: 0, next: 0 }; len];
    let mut call_pos = vec![0usize; n];
    let mut ret_pos = vec![0usize; n];
    for (k, &(_, _, op, is_call)) in order.iter().enumerate() {
        let pos = k + 1;
        ev[pos] = Event { op, is_call, prev: pos - 1, next: pos + 1 };
        if is_call {
            call_pos[op] = pos;
        } else {
            ret_pos[op] = pos;
        }
    }
    ev[0].next = 1;
    ev[tail].prev = tail - 1;

    let unlink = |ev: &mut Vec<Event>, p: usize| {
        let (a, b) = (ev[p].prev, ev[p].next);
        ev[a].next = b;
        ev[b].prev = a;
    };
    let relink = |ev: &mut Vec<Event>, p: usize| {
        let (a, b) = (ev[p].prev, ev[p].next);
        ev[a].next = p;
        ev[b].prev = p;
    };

    let mut remaining_definite = ops.iter().filter(|t| t.ret.is_some()).count();
    let words = n.div_ceil(64);
    let mut linearized = vec![0u64; words];
    let mut cache: HashSet<(Vec<u64>, Option<Vec<u8>>)> = HashSet::new();
    let mut stack: Vec<(usize, Option<Vec<u8>>)> = Vec::new();
    let mut state = initial;
    let mut entry = ev[0].next;
    loop {
        if remaining_definite == 0 {
            return true;
        }
        if entry == tail {
            // Only unknown-outcome returns can be left here; back out.
            let Some((op, old)) = stack.pop() else { return false };
            state = old;
            linearized[op / 64] &= !(1 << (op % 64));
            if ops[op].ret.is_some() {
                remaining_definite += 1;
            }
            relink(&mut ev, ret_pos[op]);
            relink(&mut ev, call_pos[op]);
            entry = ev[call_pos[op]].next;
            continue;
        }
        let e = ev[entry];
        if e.is_call {
            if let Some(next_state) = step(&ops[e.op].op, &state) {
                let mut lin = linearized.clone();
                lin[e.op / 64] |= 1 << (e.op % 64);
                if cache.insert((lin.clone(), next_state.clone())) {
                    stack.push((e.op, std::mem::replace(&mut state, next_state)));
                    linearized = lin;
                    if ops[e.op].ret.is_some() {
                        remaining_definite -= 1;
                    }
                    unlink(&mut ev, call_pos[e.op]);
                    unlink(&mut ev, ret_pos[e.op]);
                    entry = ev[0].next;
                    continue;
                }
            }
            entry = e.next;
        } else {
            // A return whose call has not been linearized: backtrack.
            let Some((op, old)) = stack.pop() else { return false };
            state = old;
            linearized[op / 64] &= !(1 << (op % 64));
            if ops[op].ret.is_some() {
                remaining_definite += 1;
            }
            relink(&mut ev, ret_pos[op]);
            relink(&mut ev, call_pos[op]);
            entry = ev[call_pos[op]].next;
        }
    }
}

/// Checks every key of a history; returns the keys that fail.
pub fn nonlinearizable_keys(history: &[OpRecord], pending: &[(Op, Nanos)]) -> Vec<Vec<u8>> {
    per_key(history, pending).into_iter().filter(|(_, ops)| !linearizable(ops, None)).map(|(k, _)| k).collect()
}

/// Checks weak reads against the per-key journal of one replica:
///
/// * prefix: each returned value is the state after some prefix of the
///   key's journal;
/// * read-your-writes: that prefix includes every write the reading client
///   completed on the key before invoking the read.
///
/// Returns one message per violation.
pub fn check_weak_reads(history: &[OpRecord], journal: &BTreeMap<Vec<u8>, Vec<JournalRecord>>) -> Vec<String> {
    let empty = Vec::new();
    let mut problems = Vec::new();
    // Position of each applied write, keyed by (client, seq).
    let mut positions: HashMap<(ClientId, u64), usize> = HashMap::new();
    for recs in journal.values() {
        for (i, r) in recs.iter().enumerate() {
            positions.entry((r.client, r.seq)).or_insert(i + 1);
        }
    }
    let mut by_client: BTreeMap<ClientId, Vec<&OpRecord>> = BTreeMap::new();
    for r in history {
        by_client.entry(r.client).or_default().push(r);
    }
    for (client, ops) in by_client {
        for (i, r) in ops.iter().enumerate() {
            let Op::WeakGet { key } = &r.op else { continue };
            let value = match r.status {
                Status::Ok => r.value.clone(),
                Status::NotFound => None,
                _ => continue,
            };
            let recs = journal.get(key).unwrap_or(&empty);
            let mut floor = 0;
            for w in &ops[..i] {
                let writes_key = matches!(&w.op, Op::Put { key: k, .. } | Op::Delete { key: k } if k == key);
                if writes_key && matches!(w.status, Status::Ok | Status::NotFound) && w.completed_at <= r.invoked_at {
                    match positions.get(&(client, w.seq)) {
                        Some(&p) => floor = floor.max(p),
                        None => problems.push(format!(
                            "client {client} write seq {} acknowledged but missing from the journal",
                            w.seq
                        )),
                    }
                }
            }
            let state_at = |p: usize| if p == 0 { None } else { recs[p - 1].value.clone() };
            if !(floor..=recs.len()).any(|p| state_at(p) == value) {
                problems.push(format!(
                    "client {client} weak read seq {} of {:?} returned a value not in the journal at or after position {floor}",
                    r.seq,
                    String::from_utf8_lossy(key)
                ));
            }
        }
    }
    problems
}

/// Compares per-key journals of several replicas. Each must be a prefix of
/// the longest one; returns a message for each disagreement.
pub fn journals_agree(journals: &[(u16, Journal)]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut keys: HashSet<&Vec<u8>> = HashSet::new();
    for (_, j) in journals {
        keys.extend(j.keys());
    }
    let empty = Vec::new();
    for key in keys {
        let longest = journals.iter().map(|(_, j)| j.get(key).unwrap_or(&empty)).max_by_key(|v| v.len()).unwrap();
        for (node, j) in journals {
            let mine = j.get(key).unwrap_or(&empty);
            if longest[..mine.len()] != mine[..] {
                problems.push(format!("node {node} journal for {:?} diverges", String::from_utf8_lossy(key)));
            }
        }
    }
    problems.sort();
    problems
}
