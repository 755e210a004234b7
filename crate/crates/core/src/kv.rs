//! The replicated key-value state machine.
//!
//! State is a pure function of the applied request sequence. Requests carry
//! `(client, seq)`; the store remembers the last sequence number applied per
//! client and log and answers a re-delivered request from that record instead
//! of applying it twice.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::payload::Payload;
use crate::request::{ClientId, LogId, Op, Request, Status, WriteOp};

pub const SNAPSHOT_RETENTION: usize = 4;

type Map = BTreeMap<Vec<u8>, Vec<u8>>;

/// State-machine answer to one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: Status,
    pub value: Option<Payload>,
}

impl Reply {
    pub fn status(status: Status) -> Self {
        Reply { status, value: None }
    }
}

/// Per-key write history of one replica.
pub type Journal = BTreeMap<Vec<u8>, Vec<JournalRecord>>;

/// One applied update, recorded per key when journaling is on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalRecord {
    pub log: LogId,
    pub client: ClientId,
    pub seq: u64,
    /// Value after the update; `None` for a delete.
    pub value: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
struct Snapshot {
    map: Arc<Map>,
    cut: Vec<u64>,
    used: u64,
}

#[derive(Debug, Clone, Default)]
pub struct KvStore {
    map: Arc<Map>,
    sessions: HashMap<(ClientId, LogId), (u64, Reply)>,
    snapshots: BTreeMap<u64, Snapshot>,
    clock: u64,
    journal: Option<BTreeMap<Vec<u8>, Vec<JournalRecord>>>,
    applied: u64,
}

impl KvStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store that records every update per key.
    pub fn with_journal() -> Self {
        KvStore { journal: Some(BTreeMap::new()), ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        self.map.get(key).map(Vec::as_slice)
    }

    /// Number of requests applied (duplicates excluded).
    pub fn applied(&self) -> u64 {
        self.applied
    }

    /// Returns the cached reply for a re-delivered request, or `None` if the
    /// request is new.
    fn duplicate(&self, client: ClientId, log: LogId, seq: u64) -> Option<Reply> {
        match self.sessions.get(&(client, log)) {
            Some((last, reply)) if *last == seq => Some(reply.clone()),
            Some((last, _)) if *last > seq => Some(Reply::status(Status::Invalid)),
            _ => None,
        }
    }

    /// True when `(client, seq)` was already applied on `log`.
    pub fn is_duplicate(&self, client: ClientId, log: LogId, seq: u64) -> bool {
        self.duplicate(client, log, seq).is_some()
    }

    /// Applies a single-log request taken from `log`.
    pub fn apply(&mut self, log: LogId, req: &Request) -> Reply {
        if let Some(r) = self.duplicate(req.client, log, req.seq) {
            return r;
        }
        let reply = match &req.op {
            Op::Get { key } | Op::WeakGet { key } => self.read(key),
            Op::Put { key, value } => {
                self.write(log, req.client, req.seq, key, Some(value));
                Reply::status(Status::Ok)
            }
            Op::Delete { key } => {
                let existed = self.map.contains_key(key);
                self.write(log, req.client, req.seq, key, None);
                Reply::status(if existed { Status::Ok } else { Status::NotFound })
            }
            Op::Gang { .. } | Op::Snapshot => Reply::status(Status::Invalid),
        };
        self.applied += 1;
        self.sessions.insert((req.client, log), (req.seq, reply.clone()));
        reply
    }

    /// Applies one log's section of a successful ganged operation.
    pub fn apply_section(&mut self, log: LogId, client: ClientId, seq: u64, ops: &[WriteOp]) -> Reply {
        if let Some(r) = self.duplicate(client, log, seq) {
            return r;
        }
        for op in ops {
            match op {
                WriteOp::Put { key, value } => self.write(log, client, seq, key, Some(value)),
                WriteOp::Delete { key } => self.write(log, client, seq, key, None),
            }
        }
        self.applied += 1;
        let reply = Reply::status(Status::Ok);
        self.sessions.insert((client, log), (seq, reply.clone()));
        reply
    }

    /// Read outside the log (weak read).
    pub fn read(&self, key: &[u8]) -> Reply {
        match self.map.get(key) {
            Some(v) => Reply { status: Status::Ok, value: Some(Payload::from(v.as_slice())) },
            None => Reply::status(Status::NotFound),
        }
    }

    fn write(&mut self, log: LogId, client: ClientId, seq: u64, key: &[u8], value: Option<&Vec<u8>>) {
        let map = Arc::make_mut(&mut self.map);
        match value {
            Some(v) => {
                map.insert(key.to_vec(), v.clone());
            }
            None => {
                map.remove(key);
            }
        }
        if let Some(j) = self.journal.as_mut() {
            j.entry(key.to_vec()).or_default().push(JournalRecord { log, client, seq, value: value.cloned() });
        }
    }

    /// Captures a point-in-time view. Old snapshots beyond the retention
    /// limit are evicted least recently used first.
    pub fn capture(&mut self, id: u64, cut: Vec<u64>) {
        self.clock += 1;
        self.snapshots.insert(id, Snapshot { map: Arc::clone(&self.map), cut, used: self.clock });
        while self.snapshots.len() > SNAPSHOT_RETENTION {
            let oldest = self.snapshots.iter().min_by_key(|(_, s)| s.used).map(|(id, _)| *id).unwrap();
            self.snapshots.remove(&oldest);
        }
    }

    pub fn snapshot_ids(&self) -> Vec<u64> {
        self.snapshots.keys().copied().collect()
    }

    pub fn snapshot_cut(&self, id: u64) -> Option<&[u64]> {
        self.snapshots.get(&id).map(|s| s.cut.as_slice())
    }

    pub fn snapshot_get(&mut self, id: u64, key: &[u8]) -> Option<Option<Vec<u8>>> {
        self.clock += 1;
        let clock = self.clock;
        let s = self.snapshots.get_mut(&id)?;
        s.used = clock;
        Some(s.map.get(key).cloned())
    }

    /// Hash of the snapshot's key-value contents.
    pub fn snapshot_hash(&self, id: u64) -> Option<u64> {
        self.snapshots.get(&id).map(|s| hash_map(&s.map))
    }

    /// Order-sensitive hash of the key-value contents.
    pub fn state_hash(&self) -> u64 {
        hash_map(&self.map)
    }

    pub fn journal(&self) -> Option<&BTreeMap<Vec<u8>, Vec<JournalRecord>>> {
        self.journal.as_ref()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.map.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }
}

fn hash_map(map: &Map) -> u64 {
    let mut h = xxhash_rust::xxh64::Xxh64::new(0);
    for (k, v) in map {
        h.update(&(k.len() as u32).to_le_bytes());
        h.update(k);
        h.update(&(v.len() as u32).to_le_bytes());
        h.update(v);
    }
    h.digest()
}

/// The store behind the single synchronization boundary shared by all log
/// instances of a replica.
#[derive(Debug, Clone, Default)]
pub struct SharedKv(Arc<Mutex<KvStore>>);

impl SharedKv {
    pub fn new(store: KvStore) -> Self {
        SharedKv(Arc::new(Mutex::new(store)))
    }

    pub fn lock(&self) -> MutexGuard<'_, KvStore> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}
