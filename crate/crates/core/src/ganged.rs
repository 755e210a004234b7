//! Atomic cross-log operations coordinated through a shared-memory barrier.
//!
//! The coordinator (the instance for log 0) stamps a ganged request with a
//! [`Nonce`] and the terms of every participant, then hands each participant
//! its section. Each participant appends its section to its own log. When a
//! participant reaches the entry in apply order it sets its bit in the
//! coordinator's [`Barrier`] and waits until every participant has either
//! arrived or provably never will.
//!
//! "Provably never" is decided from the apply cursor of each log: entry terms
//! never decrease along a log, so once log `p` has reached a committed entry
//! whose term is above the stamped view for `p` without arriving, the section
//! cannot be in `p`'s committed log. Every replica walks the same committed
//! logs, so every replica reaches the same verdict.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};

use crate::request::{ClientId, LogId};

/// Log whose instance coordinates ganged operations.
pub const COORDINATOR: LogId = 0;

/// Largest number of logs a barrier mask can describe.
pub const MAX_LOGS: usize = 64;

/// Unique tag of one ganged operation: a 48-bit machine id and a tick count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Nonce {
    pub machine: u64,
    pub ticks: u64,
}

impl Nonce {
    pub const ENCODED_LEN: usize = 14;
    const MACHINE_MASK: u64 = (1 << 48) - 1;

    pub fn encode(&self) -> [u8; Self::ENCODED_LEN] {
        let mut b = [0u8; Self::ENCODED_LEN];
        b[..6].copy_from_slice(&(self.machine & Self::MACHINE_MASK).to_le_bytes()[..6]);
        b[6..].copy_from_slice(&self.ticks.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Nonce {
        let mut m = [0u8; 8];
        m[..6].copy_from_slice(&b[..6]);
        Nonce { machine: u64::from_le_bytes(m), ticks: u64::from_le_bytes(b[6..14].try_into().unwrap()) }
    }

    pub fn is_zero(&self) -> bool {
        self.machine == 0 && self.ticks == 0
    }

    /// Compact identifier used for snapshot handles.
    pub fn id(&self) -> u64 {
        xxhash_rust::xxh64::xxh64(&self.encode(), 0)
    }
}

/// Issues strictly increasing nonces for one coordinator.
#[derive(Debug, Clone)]
pub struct NonceSource {
    machine: u64,
    last: u64,
}

impl NonceSource {
    pub fn new(machine: u64) -> Self {
        NonceSource { machine: machine & Nonce::MACHINE_MASK, last: 0 }
    }

    /// `clock` is a tick reading anchored at a wall-clock epoch.
    pub fn next(&mut self, clock: u64) -> Nonce {
        self.last = clock.max(self.last + 1);
        Nonce { machine: self.machine, ticks: self.last }
    }
}

/// Participant terms captured at dispatch.
pub type ViewVector = Vec<(LogId, u64)>;

/// Stamp carried by every section of a ganged operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GangStamp {
    pub nonce: Nonce,
    pub client: ClientId,
    pub seq: u64,
    /// A snapshot is a ganged no-op over all logs.
    pub snapshot: bool,
    pub view: ViewVector,
}

impl GangStamp {
    pub fn term_of(&self, log: LogId) -> Option<u64> {
        self.view.iter().find(|(l, _)| *l == log).map(|(_, t)| *t)
    }

    pub fn participant_mask(&self) -> u64 {
        self.view.iter().fold(0, |m, (l, _)| m | bit(*l))
    }
}

fn bit(log: LogId) -> u64 {
    1u64 << log
}

/// Per-instance terms readable by every instance on the node.
#[derive(Debug)]
pub struct TermBoard {
    current: Vec<AtomicU64>,
    reached: Vec<AtomicU64>,
}

impl TermBoard {
    pub fn new(logs: usize) -> Self {
        assert!(logs <= MAX_LOGS, "at most {MAX_LOGS} logs");
        TermBoard {
            current: (0..logs).map(|_| AtomicU64::new(0)).collect(),
            reached: (0..logs).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    /// Current RAFT term of an instance.
    pub fn current(&self, log: LogId) -> u64 {
        self.current[log as usize].load(Ordering::Acquire)
    }

    pub fn publish_current(&self, log: LogId, term: u64) {
        self.current[log as usize].store(term, Ordering::Release);
    }

    /// Term of the committed entry at the instance's apply cursor.
    pub fn reached(&self, log: LogId) -> u64 {
        self.reached[log as usize].load(Ordering::Acquire)
    }

    pub fn publish_reached(&self, log: LogId, term: u64) {
        self.reached[log as usize].fetch_max(term, Ordering::AcqRel);
    }

    pub fn logs(&self) -> usize {
        self.current.len()
    }
}

const PENDING: u8 = 0;
const SUCCEEDED: u8 = 1;
const FAILED: u8 = 2;

/// The coordinator's fixed barrier slot. One ganged operation uses it at a
/// time; the slot is reused once every participant that arrived has consumed
/// the outcome.
#[derive(Debug, Default)]
pub struct Barrier {
    machine: AtomicU64,
    ticks: AtomicU64,
    participants: AtomicU64,
    /// Participants accounted for, by arrival or on their behalf.
    mask: AtomicU64,
    failed: AtomicBool,
    /// Participants that arrived themselves.
    present: AtomicU64,
    consumed: AtomicU64,
    resolving: AtomicBool,
    outcome: AtomicU8,
    /// Snapshot of the participant terms, for the sweep.
    view: std::sync::Mutex<ViewVector>,
    activations: AtomicU64,
}

/// What an instance should do with the ganged entry at its apply cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GangStep {
    /// Not decided yet; poll again later.
    Wait,
    /// Apply the section, then call [`Barrier::consume`].
    Apply,
    /// The operation failed; skip the section, then call [`Barrier::consume`]
    /// if `arrived`.
    Skip { arrived: bool },
}

/// Result of resolving a barrier, reported to the instance that completed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Success,
    Failure,
}

impl Barrier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nonce(&self) -> Nonce {
        Nonce { machine: self.machine.load(Ordering::Acquire), ticks: self.ticks.load(Ordering::Acquire) }
    }

    pub fn holds(&self, nonce: Nonce) -> bool {
        !nonce.is_zero() && self.nonce() == nonce
    }

    /// True when no operation occupies the slot.
    pub fn is_free(&self) -> bool {
        self.nonce().is_zero()
            || (self.outcome.load(Ordering::Acquire) != PENDING
                && self.consumed.load(Ordering::Acquire) == self.present.load(Ordering::Acquire))
    }

    pub fn activations(&self) -> u64 {
        self.activations.load(Ordering::Relaxed)
    }

    fn activate(&self, stamp: &GangStamp) -> bool {
        if !self.is_free() {
            return false;
        }
        *self.view.lock().unwrap_or_else(|e| e.into_inner()) = stamp.view.clone();
        self.participants.store(stamp.participant_mask(), Ordering::Relaxed);
        self.mask.store(0, Ordering::Relaxed);
        self.failed.store(false, Ordering::Relaxed);
        self.present.store(0, Ordering::Relaxed);
        self.consumed.store(0, Ordering::Relaxed);
        self.resolving.store(false, Ordering::Relaxed);
        self.outcome.store(PENDING, Ordering::Relaxed);
        self.machine.store(stamp.nonce.machine, Ordering::Release);
        self.ticks.store(stamp.nonce.ticks, Ordering::Release);
        self.activations.fetch_add(1, Ordering::Relaxed);
        true
    }

    /// Marks every participant that can no longer arrive.
    fn sweep(&self, board: &TermBoard) {
        let view = self.view.lock().unwrap_or_else(|e| e.into_inner()).clone();
        let mask = self.mask.load(Ordering::Acquire);
        for (log, term) in view {
            if mask & bit(log) == 0 && board.reached(log) > term {
                self.failed.store(true, Ordering::Release);
                self.mask.fetch_or(bit(log), Ordering::AcqRel);
            }
        }
    }

    /// Decides the entry at `me`'s apply cursor. `resolve` runs exactly once
    /// per operation, on the instance that completes the mask, before any
    /// participant can observe the outcome.
    pub fn step(&self, board: &TermBoard, me: LogId, stamp: &GangStamp, resolve: impl FnOnce(Resolution)) -> GangStep {
        if !self.holds(stamp.nonce) {
            if me == COORDINATOR {
                if !self.activate(stamp) {
                    return GangStep::Wait;
                }
            } else {
                // The coordinator log went past this operation without it.
                let coord_term = stamp.term_of(COORDINATOR).unwrap_or(0);
                if board.reached(COORDINATOR) > coord_term {
                    return GangStep::Skip { arrived: false };
                }
                // An operation the coordinator ordered earlier waits on this
                // log at a later term, so this section can never be reached
                // in coordinator order.
                if self.blocks_on(me, stamp) {
                    return GangStep::Skip { arrived: false };
                }
                return GangStep::Wait;
            }
        }
        self.mask.fetch_or(bit(me), Ordering::AcqRel);
        self.present.fetch_or(bit(me), Ordering::AcqRel);
        self.sweep(board);
        let participants = self.participants.load(Ordering::Acquire);
        if self.mask.load(Ordering::Acquire) & participants != participants {
            return GangStep::Wait;
        }
        match self.outcome.load(Ordering::Acquire) {
            SUCCEEDED => return GangStep::Apply,
            FAILED => return GangStep::Skip { arrived: true },
            _ => {}
        }
        if self.resolving.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
            return GangStep::Wait;
        }
        let failed = self.failed.load(Ordering::Acquire);
        resolve(if failed { Resolution::Failure } else { Resolution::Success });
        self.outcome.store(if failed { FAILED } else { SUCCEEDED }, Ordering::Release);
        if failed {
            GangStep::Skip { arrived: true }
        } else {
            GangStep::Apply
        }
    }

    fn blocks_on(&self, me: LogId, stamp: &GangStamp) -> bool {
        if self.nonce().is_zero() || self.outcome.load(Ordering::Acquire) != PENDING {
            return false;
        }
        if self.mask.load(Ordering::Acquire) & bit(me) != 0 {
            return false;
        }
        let mine = stamp.term_of(me).unwrap_or(0);
        let view = self.view.lock().unwrap_or_else(|e| e.into_inner());
        view.iter().any(|(l, t)| *l == me && *t > mine)
    }

    pub fn consume(&self, me: LogId) {
        self.consumed.fetch_or(bit(me), Ordering::AcqRel);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stamp(ticks: u64, view: &[(LogId, u64)]) -> GangStamp {
        GangStamp { nonce: Nonce { machine: 1, ticks }, client: 1, seq: ticks, snapshot: false, view: view.to_vec() }
    }

    #[test]
    fn nonce_roundtrip_and_monotone() {
        let mut src = NonceSource::new(0xFFFF_1234_5678_9ABC);
        let a = src.next(100);
        let b = src.next(100);
        let c = src.next(50);
        assert!(a < b && b < c);
        assert_eq!(a.machine, 0x1234_5678_9ABC);
        assert_eq!(Nonce::decode(&b.encode()), b);
    }

    #[test]
    fn all_arrive_then_apply() {
        let board = TermBoard::new(3);
        let b = Barrier::new();
        let s = stamp(1, &[(0, 1), (2, 1)]);
        assert_eq!(b.step(&board, 2, &s, |_| {}), GangStep::Wait);
        assert_eq!(b.step(&board, 0, &s, |_| {}), GangStep::Wait);
        let mut resolved = None;
        assert_eq!(b.step(&board, 2, &s, |r| resolved = Some(r)), GangStep::Apply);
        assert_eq!(resolved, Some(Resolution::Success));
        assert_eq!(b.step(&board, 0, &s, |_| panic!("resolved twice")), GangStep::Apply);
        assert!(!b.is_free());
        b.consume(0);
        b.consume(2);
        assert!(b.is_free());
    }

    #[test]
    fn participant_past_view_fails_everyone() {
        let board = TermBoard::new(3);
        let b = Barrier::new();
        let s = stamp(1, &[(0, 1), (1, 1), (2, 1)]);
        assert_eq!(b.step(&board, 0, &s, |_| {}), GangStep::Wait);
        assert_eq!(b.step(&board, 1, &s, |_| {}), GangStep::Wait);
        board.publish_reached(2, 2);
        let mut resolved = None;
        assert_eq!(b.step(&board, 1, &s, |r| resolved = Some(r)), GangStep::Skip { arrived: true });
        assert_eq!(resolved, Some(Resolution::Failure));
        assert_eq!(b.step(&board, 0, &s, |_| {}), GangStep::Skip { arrived: true });
    }

    #[test]
    fn missing_coordinator_section_is_skipped() {
        let board = TermBoard::new(2);
        let b = Barrier::new();
        let s = stamp(1, &[(0, 3), (1, 3)]);
        assert_eq!(b.step(&board, 1, &s, |_| {}), GangStep::Wait);
        board.publish_reached(0, 4);
        assert_eq!(b.step(&board, 1, &s, |_| {}), GangStep::Skip { arrived: false });
    }

    #[test]
    fn slot_is_not_reused_before_consumption() {
        let board = TermBoard::new(2);
        let b = Barrier::new();
        let s1 = stamp(1, &[(0, 1), (1, 1)]);
        let s2 = stamp(2, &[(0, 1), (1, 1)]);
        b.step(&board, 0, &s1, |_| {});
        b.step(&board, 1, &s1, |_| {});
        b.consume(0);
        assert_eq!(b.step(&board, 0, &s2, |_| {}), GangStep::Wait);
        b.consume(1);
        assert_eq!(b.step(&board, 0, &s2, |_| {}), GangStep::Wait);
        assert!(b.holds(s2.nonce));
    }

    #[test]
    fn incomparable_views_do_not_deadlock() {
        // Log 1 holds s2 before s1 even though the coordinator ordered s1
        // first; s1 is waiting on log 1 at a later term.
        let board = TermBoard::new(2);
        let b = Barrier::new();
        let s1 = stamp(1, &[(0, 2), (1, 5)]);
        let s2 = stamp(2, &[(0, 3), (1, 4)]);
        assert_eq!(b.step(&board, 0, &s1, |_| {}), GangStep::Wait);
        board.publish_reached(1, 4);
        assert_eq!(b.step(&board, 1, &s2, |_| {}), GangStep::Skip { arrived: false });
        board.publish_reached(1, 5);
        assert_eq!(b.step(&board, 1, &s1, |_| {}), GangStep::Apply);
    }
}
