//! Top-level log in (emulated) byte-addressable persistent memory.
//!
//! The region holds a fixed header, a small double-buffered metadata area for
//! RAFT state, a circular ring of fixed-size [`PointerSlot`]s and a payload
//! arena. Slot `lsn % ring_capacity` holds entry `lsn`, so the ring order is the
//! LSN order. Payload bytes are persisted before the slot that points at them,
//! and each slot carries a CRC seal written together with its fields, so a
//! torn slot write reads back as an empty slot.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0    magic u64 | version u32 | ring_capacity u32 | arena_offset u64
//! 64   meta record A (48 bytes)
//! 128  meta record B (48 bytes)
//! 256  ring: ring_capacity x 40-byte slots
//! ...  arena (64-byte aligned) up to the end of the region
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::medium::{FileMedium, Medium};
use crate::payload::Payload;

pub const NVM_MAGIC: u64 = 0x4359_434C_4F4E_4531;
pub const NVM_VERSION: u32 = 1;
pub const SLOT_SIZE: usize = 40;
pub const META_SIZE: usize = 48;
const META_A: u64 = 64;
const META_B: u64 = 128;
pub const RING_OFFSET: u64 = 256;
pub const ARENA_ALIGN: u64 = 64;

pub const DEFAULT_REGION_BYTES: u64 = 64 << 20;
pub const DEFAULT_RING_CAPACITY: u32 = 4096;
pub const DEFAULT_MAX_ENTRY: usize = 9000;

#[derive(Debug, Error)]
pub enum NvmError {
    #[error("region header is corrupt: {0}")]
    OpenCorrupt(String),
    #[error("region size mismatch: expected {expected} bytes, found {actual}")]
    OpenSizeMismatch { expected: u64, actual: u64 },
    #[error("log is full")]
    LogFull,
    #[error("entry of {len} bytes exceeds maximum of {max}")]
    EntryTooLarge { len: usize, max: usize },
    #[error("truncate up to lsn {upto} is beyond the tail")]
    TruncateBeyondTail { upto: u64 },
    #[error("truncate from index {from} is before the head index {head}")]
    TruncateBeforeHead { from: u64, head: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy)]
pub struct NvmConfig {
    /// Total region size in bytes.
    pub region_bytes: u64,
    pub ring_capacity: u32,
    pub max_entry: usize,
    /// Slots kept back for [`AppendClass::Reserved`] appends.
    pub reserve_slots: u32,
}

impl Default for NvmConfig {
    fn default() -> Self {
        NvmConfig {
            region_bytes: DEFAULT_REGION_BYTES,
            ring_capacity: DEFAULT_RING_CAPACITY,
            max_entry: DEFAULT_MAX_ENTRY,
            reserve_slots: 4,
        }
    }
}

impl NvmConfig {
    pub fn small(region_bytes: u64, ring_capacity: u32) -> Self {
        NvmConfig { region_bytes, ring_capacity, ..Default::default() }
    }

    pub fn arena_offset(&self) -> u64 {
        align_up(RING_OFFSET + self.ring_capacity as u64 * SLOT_SIZE as u64, ARENA_ALIGN)
    }
}

/// Whether an append may dip into the reserved slots and arena bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendClass {
    Normal,
    Reserved,
}

/// On-media pointer record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PointerSlot {
    /// Absolute region offset of the payload; 0 marks an empty slot.
    pub offset: u64,
    pub length: u32,
    pub lsn: u64,
    pub term: u64,
    pub index: u64,
}

impl PointerSlot {
    pub fn encode(&self) -> [u8; SLOT_SIZE] {
        let mut b = [0u8; SLOT_SIZE];
        b[0..8].copy_from_slice(&self.offset.to_le_bytes());
        b[8..12].copy_from_slice(&self.length.to_le_bytes());
        b[16..24].copy_from_slice(&self.lsn.to_le_bytes());
        b[24..32].copy_from_slice(&self.term.to_le_bytes());
        b[32..40].copy_from_slice(&self.index.to_le_bytes());
        let seal = slot_seal(&b);
        b[12..16].copy_from_slice(&seal.to_le_bytes());
        b
    }

    /// Returns the slot if it is non-empty and its seal verifies.
    pub fn decode(b: &[u8; SLOT_SIZE]) -> Option<PointerSlot> {
        let seal = u32::from_le_bytes(b[12..16].try_into().unwrap());
        let slot = PointerSlot {
            offset: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            length: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            lsn: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            term: u64::from_le_bytes(b[24..32].try_into().unwrap()),
            index: u64::from_le_bytes(b[32..40].try_into().unwrap()),
        };
        (slot.offset != 0 && seal == slot_seal(b)).then_some(slot)
    }
}

fn slot_seal(b: &[u8; SLOT_SIZE]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&b[0..12]);
    h.update(&b[16..40]);
    h.finalize()
}

/// Persistent RAFT metadata kept in the region header area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RaftMeta {
    pub current_term: u64,
    pub voted_for: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct MetaRecord {
    seq: u64,
    meta: RaftMeta,
    head_lsn: u64,
}

impl MetaRecord {
    fn encode(&self) -> [u8; META_SIZE] {
        let mut b = [0u8; META_SIZE];
        b[0..8].copy_from_slice(&self.seq.to_le_bytes());
        b[8..16].copy_from_slice(&self.meta.current_term.to_le_bytes());
        b[16..24].copy_from_slice(&self.meta.voted_for.unwrap_or(u64::MAX).to_le_bytes());
        b[24..32].copy_from_slice(&self.head_lsn.to_le_bytes());
        let crc = crc32fast::hash(&b[0..40]);
        b[40..44].copy_from_slice(&crc.to_le_bytes());
        b
    }

    fn decode(b: &[u8; META_SIZE]) -> Option<MetaRecord> {
        let crc = u32::from_le_bytes(b[40..44].try_into().unwrap());
        let seq = u64::from_le_bytes(b[0..8].try_into().unwrap());
        if seq == 0 || crc != crc32fast::hash(&b[0..40]) {
            return None;
        }
        let voted = u64::from_le_bytes(b[16..24].try_into().unwrap());
        Some(MetaRecord {
            seq,
            meta: RaftMeta {
                current_term: u64::from_le_bytes(b[8..16].try_into().unwrap()),
                voted_for: (voted != u64::MAX).then_some(voted),
            },
            head_lsn: u64::from_le_bytes(b[24..32].try_into().unwrap()),
        })
    }
}

/// A recovered or live entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NvmEntry {
    pub lsn: u64,
    pub term: u64,
    pub index: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
struct LiveSlot {
    slot: PointerSlot,
    alloc_len: u64,
    hold: Vec<Payload>,
}

#[derive(Debug)]
struct Deferred {
    offset: u64,
    len: u64,
    hold: Vec<Payload>,
}

/// First-fit allocator over the payload arena, 64-byte granularity.
#[derive(Debug, Clone, Default)]
pub struct BufferPool {
    start: u64,
    len: u64,
    /// offset -> length of free extents, coalesced.
    free: BTreeMap<u64, u64>,
}

impl BufferPool {
    fn new(start: u64, len: u64) -> Self {
        let mut free = BTreeMap::new();
        if len > 0 {
            free.insert(start, len);
        }
        BufferPool { start, len, free }
    }

    fn alloc(&mut self, need: u64) -> Option<u64> {
        let (&off, &len) = self.free.iter().find(|(_, &l)| l >= need)?;
        self.free.remove(&off);
        if len > need {
            self.free.insert(off + need, len - need);
        }
        Some(off)
    }

    fn release(&mut self, off: u64, len: u64) {
        let mut off = off;
        let mut len = len;
        if let Some((&prev, &plen)) = self.free.range(..off).next_back() {
            debug_assert!(prev + plen <= off, "double free");
            if prev + plen == off {
                self.free.remove(&prev);
                off = prev;
                len += plen;
            }
        }
        if let Some(&nlen) = self.free.get(&(off + len)) {
            self.free.remove(&(off + len));
            len += nlen;
        }
        self.free.insert(off, len);
    }

    /// Removes `[off, off+len)` from the free set; used by recovery.
    fn claim(&mut self, off: u64, len: u64) -> bool {
        let Some((&foff, &flen)) = self.free.range(..=off).next_back() else {
            return false;
        };
        if foff + flen < off + len {
            return false;
        }
        self.free.remove(&foff);
        if off > foff {
            self.free.insert(foff, off - foff);
        }
        if foff + flen > off + len {
            self.free.insert(off + len, foff + flen - off - len);
        }
        true
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.values().sum()
    }

    pub fn arena_bytes(&self) -> u64 {
        self.len
    }

    pub fn arena_start(&self) -> u64 {
        self.start
    }

    pub fn free_extents(&self) -> usize {
        self.free.len()
    }

    fn largest_free(&self) -> u64 {
        self.free.values().copied().max().unwrap_or(0)
    }
}

pub fn align_up(v: u64, a: u64) -> u64 {
    v.div_ceil(a) * a
}

fn alloc_len_for(len: usize) -> u64 {
    align_up((len as u64).max(1), ARENA_ALIGN)
}

/// The NVM log of one physical log.
#[derive(Debug)]
pub struct NvmRegion<M: Medium> {
    medium: M,
    cfg: NvmConfig,
    ring_capacity: u32,
    live: VecDeque<LiveSlot>,
    head_lsn: u64,
    next_lsn: u64,
    meta: MetaRecord,
    pool: BufferPool,
    deferred: Vec<Deferred>,
}

impl NvmRegion<FileMedium> {
    /// Creates the region file if absent, otherwise recovers it.
    pub fn open_path(path: &Path, cfg: NvmConfig) -> Result<Self, NvmError> {
        let (medium, created) = FileMedium::open_or_create(path, cfg.region_bytes)?;
        if created {
            Self::format(medium, cfg)
        } else {
            Self::open(medium, cfg)
        }
    }
}

impl<M: Medium> NvmRegion<M> {
    /// Writes a fresh header over `medium`.
    pub fn format(mut medium: M, cfg: NvmConfig) -> Result<Self, NvmError> {
        let arena_offset = cfg.arena_offset();
        if medium.len() != cfg.region_bytes {
            return Err(NvmError::OpenSizeMismatch { expected: cfg.region_bytes, actual: medium.len() });
        }
        if arena_offset + ARENA_ALIGN > cfg.region_bytes {
            return Err(NvmError::OpenCorrupt("region too small for ring".into()));
        }
        let zero = vec![0u8; (arena_offset - RING_OFFSET) as usize];
        medium.write_at(RING_OFFSET, &zero)?;
        let meta = MetaRecord { seq: 1, ..Default::default() };
        medium.write_at(META_A, &meta.encode())?;
        medium.write_at(META_B, &[0u8; META_SIZE])?;
        medium.persist(0, arena_offset)?;
        let mut hdr = [0u8; 24];
        hdr[0..8].copy_from_slice(&NVM_MAGIC.to_le_bytes());
        hdr[8..12].copy_from_slice(&NVM_VERSION.to_le_bytes());
        hdr[12..16].copy_from_slice(&cfg.ring_capacity.to_le_bytes());
        hdr[16..24].copy_from_slice(&arena_offset.to_le_bytes());
        medium.write_at(0, &hdr)?;
        medium.persist(0, 24)?;
        Ok(NvmRegion {
            pool: BufferPool::new(arena_offset, cfg.region_bytes - arena_offset),
            medium,
            ring_capacity: cfg.ring_capacity,
            cfg,
            live: VecDeque::new(),
            head_lsn: 0,
            next_lsn: 0,
            meta,
            deferred: Vec::new(),
        })
    }

    /// Opens `medium`: formats it when the header is all zero, otherwise
    /// recovers ring and allocator state from the valid slots.
    pub fn open_or_format(medium: M, cfg: NvmConfig) -> Result<Self, NvmError> {
        let mut hdr = [0u8; 24];
        if medium.len() >= 24 {
            medium.read_at(0, &mut hdr)?;
        }
        if hdr.iter().all(|&b| b == 0) {
            Self::format(medium, cfg)
        } else {
            Self::open(medium, cfg)
        }
    }

    /// Recovers a previously formatted region.
    pub fn open(medium: M, cfg: NvmConfig) -> Result<Self, NvmError> {
        if medium.len() != cfg.region_bytes {
            return Err(NvmError::OpenSizeMismatch { expected: cfg.region_bytes, actual: medium.len() });
        }
        let mut hdr = [0u8; 24];
        medium.read_at(0, &mut hdr)?;
        let magic = u64::from_le_bytes(hdr[0..8].try_into().unwrap());
        let version = u32::from_le_bytes(hdr[8..12].try_into().unwrap());
        let ring_capacity = u32::from_le_bytes(hdr[12..16].try_into().unwrap());
        let arena_offset = u64::from_le_bytes(hdr[16..24].try_into().unwrap());
        if magic != NVM_MAGIC {
            return Err(NvmError::OpenCorrupt(format!("bad magic {magic:#x}")));
        }
        if version != NVM_VERSION {
            return Err(NvmError::OpenCorrupt(format!("unsupported version {version}")));
        }
        let expect_arena = align_up(RING_OFFSET + ring_capacity as u64 * SLOT_SIZE as u64, ARENA_ALIGN);
        if ring_capacity == 0 || arena_offset != expect_arena || arena_offset >= medium.len() {
            return Err(NvmError::OpenCorrupt("inconsistent ring geometry".into()));
        }

        let mut ma = [0u8; META_SIZE];
        let mut mb = [0u8; META_SIZE];
        medium.read_at(META_A, &mut ma)?;
        medium.read_at(META_B, &mut mb)?;
        let meta = match (MetaRecord::decode(&ma), MetaRecord::decode(&mb)) {
            (Some(a), Some(b)) => {
                if a.seq >= b.seq {
                    a
                } else {
                    b
                }
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => return Err(NvmError::OpenCorrupt("no valid metadata record".into())),
        };

        let mut ring = vec![0u8; ring_capacity as usize * SLOT_SIZE];
        medium.read_at(RING_OFFSET, &mut ring)?;
        let slot_at = |lsn: u64| -> Option<PointerSlot> {
            let pos = (lsn % ring_capacity as u64) as usize * SLOT_SIZE;
            let raw: &[u8; SLOT_SIZE] = ring[pos..pos + SLOT_SIZE].try_into().unwrap();
            PointerSlot::decode(raw).filter(|s| s.lsn == lsn)
        };

        let mut pool = BufferPool::new(arena_offset, medium.len() - arena_offset);
        let mut live = VecDeque::new();
        let mut lsn = meta.head_lsn;
        while live.len() < ring_capacity as usize {
            let Some(slot) = slot_at(lsn) else { break };
            let alloc = alloc_len_for(slot.length as usize);
            if slot.offset < arena_offset || slot.offset % ARENA_ALIGN != 0 || !pool.claim(slot.offset, alloc) {
                return Err(NvmError::OpenCorrupt(format!("slot for lsn {lsn} points at an invalid or shared extent")));
            }
            live.push_back(LiveSlot { slot, alloc_len: alloc, hold: Vec::new() });
            lsn += 1;
        }

        let mut cfg = cfg;
        cfg.ring_capacity = ring_capacity;
        Ok(NvmRegion {
            medium,
            cfg,
            ring_capacity,
            head_lsn: meta.head_lsn,
            next_lsn: lsn,
            live,
            meta,
            pool,
            deferred: Vec::new(),
        })
    }

    pub fn config(&self) -> &NvmConfig {
        &self.cfg
    }

    pub fn medium(&self) -> &M {
        &self.medium
    }

    pub fn ring_capacity(&self) -> u32 {
        self.ring_capacity
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// LSN of the oldest live entry (equals `next_lsn` when empty).
    pub fn head_lsn(&self) -> u64 {
        self.head_lsn
    }

    /// LSN the next append will receive.
    pub fn next_lsn(&self) -> u64 {
        self.next_lsn
    }

    pub fn pool(&self) -> &BufferPool {
        &self.pool
    }

    /// Bytes allocated to live slots.
    pub fn live_alloc_bytes(&self) -> u64 {
        self.live.iter().map(|s| s.alloc_len).sum()
    }

    /// Bytes held by truncated slots whose buffers are still referenced.
    pub fn deferred_bytes(&self) -> u64 {
        self.deferred.iter().map(|d| d.len).sum()
    }

    pub fn slots(&self) -> impl Iterator<Item = &PointerSlot> {
        self.live.iter().map(|s| &s.slot)
    }

    pub fn first_index(&self) -> Option<u64> {
        self.live.front().map(|s| s.slot.index)
    }

    pub fn last_index(&self) -> Option<u64> {
        self.live.back().map(|s| s.slot.index)
    }

    pub fn raft_meta(&self) -> RaftMeta {
        self.meta.meta
    }

    /// Persists RAFT term and vote.
    pub fn set_raft_meta(&mut self, meta: RaftMeta) -> Result<(), NvmError> {
        let rec = MetaRecord { seq: self.meta.seq + 1, meta, head_lsn: self.meta.head_lsn };
        self.write_meta(rec)
    }

    fn write_meta(&mut self, rec: MetaRecord) -> Result<(), NvmError> {
        let at = if rec.seq % 2 == 1 { META_A } else { META_B };
        self.medium.write_at(at, &rec.encode())?;
        self.medium.persist(at, META_SIZE as u64)?;
        self.meta = rec;
        Ok(())
    }

    /// Free ring slots available to an append of the given class.
    pub fn free_slots(&self, class: AppendClass) -> u32 {
        let used = self.live.len() as u32;
        let cap = match class {
            AppendClass::Normal => self.ring_capacity.saturating_sub(self.cfg.reserve_slots),
            AppendClass::Reserved => self.ring_capacity,
        };
        cap.saturating_sub(used)
    }

    /// Fraction of ring slots in use.
    pub fn ring_fill(&self) -> f64 {
        self.live.len() as f64 / self.ring_capacity as f64
    }

    /// Fraction of the arena in use (including deferred buffers).
    pub fn arena_fill(&self) -> f64 {
        1.0 - self.pool.free_bytes() as f64 / self.pool.arena_bytes() as f64
    }

    /// Appends a single contiguous payload.
    pub fn append(&mut self, term: u64, index: u64, payload: &[u8]) -> Result<u64, NvmError> {
        self.append_gather(term, index, &[payload], Vec::new(), AppendClass::Normal)
    }

    /// Appends the concatenation of `chunks` as one entry. `hold` are the
    /// packet buffers the entry was built from; the arena extent is only
    /// recycled once every one of them has been released elsewhere.
    pub fn append_gather(
        &mut self,
        term: u64,
        index: u64,
        chunks: &[&[u8]],
        hold: Vec<Payload>,
        class: AppendClass,
    ) -> Result<u64, NvmError> {
        let len: usize = chunks.iter().map(|c| c.len()).sum();
        if len > self.cfg.max_entry {
            return Err(NvmError::EntryTooLarge { len, max: self.cfg.max_entry });
        }
        if self.free_slots(class) == 0 {
            return Err(NvmError::LogFull);
        }
        let need = alloc_len_for(len);
        let offset = self.allocate(need, class).ok_or(NvmError::LogFull)?;

        let mut at = offset;
        for c in chunks {
            self.medium.write_at(at, c)?;
            at += c.len() as u64;
        }
        self.medium.persist(offset, len as u64)?;

        let lsn = self.next_lsn;
        let slot = PointerSlot { offset, length: len as u32, lsn, term, index };
        let pos = self.slot_pos(lsn);
        self.medium.write_at(pos, &slot.encode())?;
        self.medium.persist(pos, SLOT_SIZE as u64)?;

        self.live.push_back(LiveSlot { slot, alloc_len: need, hold });
        self.next_lsn += 1;
        Ok(lsn)
    }

    fn allocate(&mut self, need: u64, class: AppendClass) -> Option<u64> {
        let reserve = match class {
            AppendClass::Normal => alloc_len_for(self.cfg.max_entry) * self.cfg.reserve_slots as u64,
            AppendClass::Reserved => 0,
        };
        for attempt in 0..2 {
            if self.pool.free_bytes() >= need + reserve && self.pool.largest_free() >= need {
                if let Some(off) = self.pool.alloc(need) {
                    return Some(off);
                }
            }
            if attempt == 0 {
                self.reclaim();
            }
        }
        None
    }

    fn slot_pos(&self, lsn: u64) -> u64 {
        RING_OFFSET + (lsn % self.ring_capacity as u64) * SLOT_SIZE as u64
    }

    /// Returns buffers of truncated slots to the pool once no other handle
    /// references them. Returns the number of bytes reclaimed.
    pub fn reclaim(&mut self) -> u64 {
        let mut freed = 0;
        let mut i = 0;
        while i < self.deferred.len() {
            if self.deferred[i].hold.iter().all(|p| p.ref_count() == 1) {
                let d = self.deferred.swap_remove(i);
                self.pool.release(d.offset, d.len);
                freed += d.len;
            } else {
                i += 1;
            }
        }
        freed
    }

    fn retire(&mut self, ls: LiveSlot) {
        self.deferred.push(Deferred { offset: ls.slot.offset, len: ls.alloc_len, hold: ls.hold });
    }

    /// Invalidates every slot with `lsn <= upto`; `None` removes nothing.
    pub fn truncate_front(&mut self, upto: Option<u64>) -> Result<u64, NvmError> {
        let Some(upto) = upto else { return Ok(0) };
        if upto >= self.next_lsn {
            return Err(NvmError::TruncateBeyondTail { upto });
        }
        if upto < self.head_lsn {
            return Ok(0);
        }
        let new_head = upto + 1;
        let rec = MetaRecord { seq: self.meta.seq + 1, meta: self.meta.meta, head_lsn: new_head };
        self.write_meta(rec)?;
        let mut count = 0;
        while self.live.front().is_some_and(|s| s.slot.lsn < new_head) {
            let ls = self.live.pop_front().unwrap();
            let pos = self.slot_pos(ls.slot.lsn);
            self.medium.write_at(pos, &[0u8; SLOT_SIZE])?;
            self.retire(ls);
            count += 1;
        }
        self.medium.persist(RING_OFFSET, self.ring_capacity as u64 * SLOT_SIZE as u64)?;
        self.head_lsn = new_head;
        self.reclaim();
        Ok(count)
    }

    /// Removes every entry whose RAFT index is `>= from_index`, newest first,
    /// each removal persisted before the next.
    pub fn truncate_back(&mut self, from_index: u64) -> Result<u64, NvmError> {
        if let Some(head) = self.first_index() {
            if from_index < head {
                return Err(NvmError::TruncateBeforeHead { from: from_index, head });
            }
        }
        let mut count = 0;
        while self.live.back().is_some_and(|s| s.slot.index >= from_index) {
            let ls = self.live.pop_back().unwrap();
            let pos = self.slot_pos(ls.slot.lsn);
            self.medium.write_at(pos, &[0u8; SLOT_SIZE])?;
            self.medium.persist(pos, SLOT_SIZE as u64)?;
            self.next_lsn = ls.slot.lsn;
            self.retire(ls);
            count += 1;
        }
        self.reclaim();
        Ok(count)
    }

    /// Reads the payload of a live slot.
    pub fn read_payload(&self, slot: &PointerSlot) -> Result<Vec<u8>, NvmError> {
        let mut buf = vec![0u8; slot.length as usize];
        self.medium.read_at(slot.offset, &mut buf)?;
        Ok(buf)
    }

    /// Live entries, head to tail.
    pub fn entries(&self) -> Result<Vec<NvmEntry>, NvmError> {
        self.live
            .iter()
            .map(|ls| {
                Ok(NvmEntry {
                    lsn: ls.slot.lsn,
                    term: ls.slot.term,
                    index: ls.slot.index,
                    payload: self.read_payload(&ls.slot)?,
                })
            })
            .collect()
    }

    pub fn into_medium(self) -> M {
        self.medium
    }
}
