//! The two-level log of one physical log plus its in-memory mirror.
//!
//! Appends go to the NVM log and are durable on return. Committed and applied
//! entries are drained to the flashlog in the background. Replication is served
//! from the mirror, which holds the same entries as packet buffer handles; the
//! flashlog is read only when recovering.

use thiserror::Error;

use crate::entry::{EntryBody, LogEntry};
use crate::flashlog::{merge_recover, DrainReport, FlashConfig, FlashError, FlashLog};
use crate::medium::Medium;
use crate::nvm::{AppendClass, NvmConfig, NvmError, NvmRegion, RaftMeta};
use crate::request::DecodeError;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error(transparent)]
    Nvm(#[from] NvmError),
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error("undecodable entry at index {index}: {err}")]
    Decode { index: u64, err: DecodeError },
    #[error("recovered log is not contiguous: {0}")]
    Gap(String),
}

#[derive(Debug, Clone, Copy)]
pub struct StorageConfig {
    pub nvm: NvmConfig,
    pub flash: FlashConfig,
    /// Flush the partial flashlog segment once the NVM ring or arena is
    /// fuller than this fraction.
    pub flush_threshold: f64,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig { nvm: NvmConfig::default(), flash: FlashConfig::default(), flush_threshold: 0.5 }
    }
}

impl StorageConfig {
    /// Small regions for simulation.
    pub fn compact(region_bytes: u64, ring_capacity: u32) -> Self {
        StorageConfig {
            nvm: NvmConfig::small(region_bytes, ring_capacity),
            flash: FlashConfig { prealloc_chunk: 1 << 20, ..FlashConfig::default() },
            flush_threshold: 0.5,
        }
    }
}

pub struct LogStore<M: Medium> {
    nvm: NvmRegion<M>,
    flash: FlashLog<M>,
    cfg: StorageConfig,
    /// `entries[i]` has index `i + 1`.
    entries: Vec<LogEntry>,
    /// Running digest over the entries up to and including each index.
    chain: Vec<u64>,
    /// Highest index known to be in the flashlog at open.
    recovered_flash: u64,
    /// Mirror entries below this index no longer share NVM buffers.
    rebuilt: u64,
}

impl<M: Medium> std::fmt::Debug for LogStore<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogStore").field("last_index", &self.last_index()).field("nvm_len", &self.nvm.len()).finish()
    }
}

impl<M: Medium> LogStore<M> {
    /// Opens (formatting when blank) both levels and rebuilds the mirror from
    /// their merged contents.
    pub fn open(nvm_medium: M, flash_medium: M, cfg: StorageConfig) -> Result<Self, StorageError> {
        let nvm = NvmRegion::open_or_format(nvm_medium, cfg.nvm)?;
        let (flash, records) = FlashLog::open(flash_medium, cfg.flash)?;
        let recovered_flash = records.len() as u64;
        let merged = merge_recover(&records, &nvm.entries()?)?;
        let mut store = LogStore {
            nvm,
            flash,
            cfg,
            entries: Vec::new(),
            chain: Vec::new(),
            recovered_flash,
            rebuilt: recovered_flash,
        };
        for (i, rec) in merged.iter().enumerate() {
            let expect = i as u64 + 1;
            if rec.index != expect || rec.lsn != i as u64 {
                return Err(StorageError::Gap(format!("position {i} holds lsn {} index {}", rec.lsn, rec.index)));
            }
            let e = LogEntry::decode_body(rec.term, rec.index, &rec.body)
                .map_err(|err| StorageError::Decode { index: rec.index, err })?;
            store.push_mirror(e);
        }
        if recovered_flash > 0 && merged.first().map(|r| r.lsn) != Some(0) {
            return Err(StorageError::Gap("flashlog does not start at lsn 0".into()));
        }
        Ok(store)
    }

    fn push_mirror(&mut self, e: LogEntry) {
        let prev = self.chain.last().copied().unwrap_or(0);
        self.chain.push(xxhash_rust::xxh64::xxh64(&e.digest().to_le_bytes(), prev));
        self.entries.push(e);
    }

    pub fn last_index(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn last_term(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.term)
    }

    /// Term at `index`; index 0 has term 0.
    pub fn term_at(&self, index: u64) -> Option<u64> {
        if index == 0 {
            return Some(0);
        }
        self.entries.get(index as usize - 1).map(|e| e.term)
    }

    pub fn entry(&self, index: u64) -> Option<&LogEntry> {
        index.checked_sub(1).and_then(|i| self.entries.get(i as usize))
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// Running digest of the prefix ending at `index` (0 for the empty prefix).
    pub fn chain_at(&self, index: u64) -> Option<u64> {
        if index == 0 {
            return Some(0);
        }
        self.chain.get(index as usize - 1).copied()
    }

    /// Clones of entries from `from`, stopping before `max_bytes` of encoded
    /// bodies would be exceeded (at least one entry is returned if available).
    pub fn slice_from(&self, from: u64, max_bytes: usize, max_count: usize) -> Vec<LogEntry> {
        let mut out = Vec::new();
        let mut bytes = 0;
        let mut i = from.max(1);
        while let Some(e) = self.entry(i) {
            let len = e.body_len() + 20;
            if !out.is_empty() && (bytes + len > max_bytes || out.len() >= max_count) {
                break;
            }
            bytes += len;
            out.push(e.clone());
            i += 1;
        }
        out
    }

    /// Persists `e` at the tail. Durable on return.
    pub fn append(&mut self, e: LogEntry, class: AppendClass) -> Result<(), StorageError> {
        assert_eq!(e.index, self.last_index() + 1, "append out of order");
        let holds = e.holds();
        e.gather(|chunks| self.nvm.append_gather(e.term, e.index, chunks, holds, class))?;
        self.push_mirror(e);
        Ok(())
    }

    /// Removes entries with index `>= from`.
    pub fn truncate_from(&mut self, from: u64) -> Result<u64, StorageError> {
        if from > self.last_index() {
            return Ok(0);
        }
        let removed = self.nvm.truncate_back(from)?;
        self.entries.truncate(from as usize - 1);
        self.rebuilt = self.rebuilt.min(from - 1);
        self.chain.truncate(from as usize - 1);
        Ok(removed)
    }

    /// Drains entries up to `applied` into the flashlog.
    pub fn drain(&mut self, applied: u64) -> Result<DrainReport, StorageError> {
        let upto = applied.checked_sub(1);
        let flush = self.nvm.ring_fill() > self.cfg.flush_threshold || self.nvm.arena_fill() > self.cfg.flush_threshold;
        let report = self.flash.drain_step(&mut self.nvm, upto, flush)?;
        self.release_drained();
        Ok(report)
    }

    /// Rebuilds mirror entries that left the NVM ring from their encoded
    /// bytes, so the ring's buffers can return to the pool.
    fn release_drained(&mut self) {
        let below = self.nvm.first_index().unwrap_or(self.last_index() + 1);
        if below <= self.rebuilt + 1 {
            return;
        }
        for i in self.rebuilt..below - 1 {
            let e = &mut self.entries[i as usize];
            if matches!(e.body, EntryBody::Noop) {
                continue;
            }
            let bytes = e.encode_body();
            crate::payload::record_rebuilt_bytes(bytes.len());
            *e = LogEntry::decode_body(e.term, e.index, &bytes).expect("re-decoding an encoded entry");
        }
        self.rebuilt = below - 1;
        self.nvm.reclaim();
    }

    pub fn free_slots(&self, class: AppendClass) -> u32 {
        self.nvm.free_slots(class)
    }

    pub fn raft_meta(&self) -> RaftMeta {
        self.nvm.raft_meta()
    }

    pub fn set_raft_meta(&mut self, meta: RaftMeta) -> Result<(), StorageError> {
        Ok(self.nvm.set_raft_meta(meta)?)
    }

    /// Entries known committed at open because they had reached the flashlog.
    pub fn recovered_flash_index(&self) -> u64 {
        self.recovered_flash
    }

    pub fn nvm(&self) -> &NvmRegion<M> {
        &self.nvm
    }

    pub fn flash(&self) -> &FlashLog<M> {
        &self.flash
    }

    pub fn max_entry(&self) -> usize {
        self.cfg.nvm.max_entry
    }
}
