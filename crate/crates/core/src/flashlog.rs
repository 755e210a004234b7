//! Second-level log on block storage.
//!
//! Entries drained from the head of the NVM log are packed into segment
//! buffers of 4 KiB pages. A record is a chain of fragments, each prefixed by a
//! 12-byte [`FlashRecordHeader`]; no header+fragment ever crosses a page
//! boundary. All fragments but the last carry the continuation bit. Unused page
//! tails are zero, which parses as a size-0 padding header. A page that starts
//! with a zero header and is zero throughout marks the end of the log.
//!
//! Segment writes are queued (at most `max_outstanding` in flight) and become
//! durable on completion. An NVM slot is only truncated after every write
//! covering it, and every earlier write, has completed.

use std::collections::VecDeque;
use std::io;
use std::ops::Range;

use thiserror::Error;

use crate::medium::Medium;
use crate::nvm::{NvmError, NvmRegion};

pub const PAGE_SIZE: usize = 4096;
pub const SEGMENT_SIZE: usize = 128 * 1024;
pub const RECORD_HEADER_SIZE: usize = 12;
pub const MAX_OUTSTANDING: usize = 32;
pub const CONTINUATION: u32 = 1 << 31;
pub const DEFAULT_PREALLOC_CHUNK: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum FlashError {
    #[error("payload does not fit in the remaining segment capacity")]
    SegmentFull,
    #[error("empty payload")]
    EmptyPayload,
    #[error("flashlog is corrupt at offset {offset}: {reason}")]
    RecoverCorrupt { offset: u64, reason: String },
    #[error("recovered logs are inconsistent: {0}")]
    RecoverInvariantViolation(String),
    #[error("failed to extend flashlog: {0}")]
    ExtendFailed(io::Error),
    #[error(transparent)]
    Nvm(#[from] NvmError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Fragment header: `size_and_flags` (bit 31 continuation, bits 0..30 size)
/// followed by the record LSN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlashRecordHeader {
    pub size_and_flags: u32,
    pub lsn: u64,
}

impl FlashRecordHeader {
    pub fn new(size: u32, continuation: bool, lsn: u64) -> Self {
        debug_assert!(size & CONTINUATION == 0);
        let flag = if continuation { CONTINUATION } else { 0 };
        FlashRecordHeader { size_and_flags: size | flag, lsn }
    }

    pub fn size(&self) -> u32 {
        self.size_and_flags & !CONTINUATION
    }

    pub fn continuation(&self) -> bool {
        self.size_and_flags & CONTINUATION != 0
    }

    pub fn encode(&self) -> [u8; RECORD_HEADER_SIZE] {
        let mut b = [0u8; RECORD_HEADER_SIZE];
        b[0..4].copy_from_slice(&self.size_and_flags.to_le_bytes());
        b[4..12].copy_from_slice(&self.lsn.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        FlashRecordHeader {
            size_and_flags: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            lsn: u64::from_le_bytes(b[4..12].try_into().unwrap()),
        }
    }
}

/// Where one fragment landed inside a segment buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    /// Offset of the fragment header within the segment.
    pub offset: u32,
    pub fragment_size: u32,
    pub continuation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentState {
    Filling,
    Submitted,
    Durable,
}

/// Fragment layout for `len` payload bytes starting at `fill`, stopping at
/// `limit`. Returns the fragments and the fill position after the last one.
fn plan(mut fill: usize, mut len: usize, limit: usize) -> (Vec<(usize, usize)>, usize) {
    let mut out = Vec::new();
    while len > 0 && fill < limit {
        let space = PAGE_SIZE - fill % PAGE_SIZE;
        if space < RECORD_HEADER_SIZE + 1 {
            fill += space;
            continue;
        }
        let frag = (space - RECORD_HEADER_SIZE).min(len);
        out.push((fill, frag));
        fill += RECORD_HEADER_SIZE + frag;
        len -= frag;
    }
    (out, fill)
}

/// One in-memory segment buffer.
#[derive(Debug, Clone)]
pub struct SegmentBuffer {
    bytes: Vec<u8>,
    fill: usize,
    state: SegmentState,
}

impl Default for SegmentBuffer {
    fn default() -> Self {
        Self::new(SEGMENT_SIZE)
    }
}

impl SegmentBuffer {
    pub fn new(size: usize) -> Self {
        assert!(size > 0 && size.is_multiple_of(PAGE_SIZE), "segment size must be a multiple of 4 KiB");
        SegmentBuffer { bytes: vec![0; size], fill: 0, state: SegmentState::Filling }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn fill_offset(&self) -> usize {
        self.fill
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn state(&self) -> SegmentState {
        self.state
    }

    pub fn set_state(&mut self, state: SegmentState) {
        self.state = state;
    }

    /// Places a whole record, or fails with `SegmentFull` leaving the buffer
    /// untouched.
    pub fn place(&mut self, lsn: u64, payload: &[u8]) -> Result<Vec<Placement>, FlashError> {
        if payload.is_empty() {
            return Err(FlashError::EmptyPayload);
        }
        let (frags, _) = plan(self.fill, payload.len(), self.bytes.len());
        let placed: usize = frags.iter().map(|f| f.1).sum();
        if placed < payload.len() {
            return Err(FlashError::SegmentFull);
        }
        Ok(self.write_fragments(lsn, payload, &frags, true))
    }

    /// Places as much of `payload` as fits; the last fragment written carries
    /// the continuation bit when bytes remain. Returns placements and the
    /// number of payload bytes consumed.
    pub fn place_prefix(&mut self, lsn: u64, payload: &[u8]) -> (Vec<Placement>, usize) {
        let (frags, _) = plan(self.fill, payload.len(), self.bytes.len());
        let placed: usize = frags.iter().map(|f| f.1).sum();
        let done = placed == payload.len();
        (self.write_fragments(lsn, payload, &frags, done), placed)
    }

    fn write_fragments(
        &mut self,
        lsn: u64,
        payload: &[u8],
        frags: &[(usize, usize)],
        completes: bool,
    ) -> Vec<Placement> {
        let mut src = 0;
        let mut out = Vec::with_capacity(frags.len());
        for (i, &(off, size)) in frags.iter().enumerate() {
            let last = i + 1 == frags.len();
            let cont = !(last && completes);
            let hdr = FlashRecordHeader::new(size as u32, cont, lsn);
            self.bytes[off..off + RECORD_HEADER_SIZE].copy_from_slice(&hdr.encode());
            let body = off + RECORD_HEADER_SIZE;
            self.bytes[body..body + size].copy_from_slice(&payload[src..src + size]);
            src += size;
            self.fill = body + size;
            out.push(Placement { offset: off as u32, fragment_size: size as u32, continuation: cont });
        }
        if frags.is_empty() {
            self.fill = self.bytes.len();
        }
        out
    }

    /// True when not even one more fragment can be placed.
    pub fn is_full(&self) -> bool {
        plan(self.fill, 1, self.bytes.len()).0.is_empty()
    }
}

/// Segment-buffer placement for a single record.
pub fn segment_place(buffer: &mut SegmentBuffer, lsn: u64, payload: &[u8]) -> Result<Vec<Placement>, FlashError> {
    buffer.place(lsn, payload)
}

#[derive(Debug, Clone, Copy)]
pub struct FlashConfig {
    pub segment_bytes: usize,
    pub max_outstanding: usize,
    pub prealloc_chunk: u64,
    /// Complete queued writes at the start of every drain step. When false,
    /// the owner completes them explicitly.
    pub auto_complete: bool,
}

impl Default for FlashConfig {
    fn default() -> Self {
        FlashConfig {
            segment_bytes: SEGMENT_SIZE,
            max_outstanding: MAX_OUTSTANDING,
            prealloc_chunk: DEFAULT_PREALLOC_CHUNK,
            auto_complete: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Submission {
    file_offset: u64,
    data: Vec<u8>,
    /// Highest LSN whose record is complete within this write and all earlier ones.
    covers: Option<u64>,
    done: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FlashStats {
    pub submitted: u64,
    pub completed: u64,
    pub max_in_flight: usize,
    pub stalls: u64,
    pub extends: u64,
}

/// Result of one drain step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DrainReport {
    /// LSNs copied into segment buffers by this step.
    pub drained: Range<u64>,
    /// NVM slots truncated by this step.
    pub truncated: u64,
    pub stalled: bool,
}

/// One recovered flashlog record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlashRecord {
    pub lsn: u64,
    pub payload: Vec<u8>,
}

/// Output of a flashlog scan.
#[derive(Debug, Clone, Default)]
pub struct ScanResult {
    pub records: Vec<FlashRecord>,
    /// Offset just past the last complete record.
    pub end_offset: u64,
    /// Set when an incomplete or out-of-sequence tail was dropped.
    pub truncated_tail: Option<String>,
}

fn is_zero(b: &[u8]) -> bool {
    b.iter().all(|&x| x == 0)
}

/// Scans a flashlog image from the start and reassembles records.
pub fn scan<M: Medium + ?Sized>(medium: &M) -> Result<ScanResult, FlashError> {
    let len = medium.len();
    let mut page = vec![0u8; PAGE_SIZE];
    let mut out = ScanResult::default();
    let mut open: Option<(u64, Vec<u8>, u64)> = None;
    let mut last_lsn: Option<u64> = None;
    let mut page_no = 0u64;

    'pages: while (page_no + 1) * PAGE_SIZE as u64 <= len {
        let base = page_no * PAGE_SIZE as u64;
        medium.read_at(base, &mut page)?;
        let first = FlashRecordHeader::decode(&page[..RECORD_HEADER_SIZE]);
        if first.size_and_flags == 0 {
            if is_zero(&page) {
                break;
            }
            if open.is_some() {
                out.truncated_tail = Some(format!("continuation missing at offset {base}"));
                break;
            }
            return Err(FlashError::RecoverCorrupt {
                offset: base,
                reason: "page starts with padding but is not empty".into(),
            });
        }
        let mut off = 0usize;
        while off + RECORD_HEADER_SIZE <= PAGE_SIZE {
            let hdr = FlashRecordHeader::decode(&page[off..off + RECORD_HEADER_SIZE]);
            let size = hdr.size() as usize;
            if size == 0 {
                break;
            }
            let at = base + off as u64;
            let end = off + RECORD_HEADER_SIZE + size;
            if end > PAGE_SIZE {
                return Err(FlashError::RecoverCorrupt {
                    offset: at,
                    reason: "fragment crosses a page boundary".into(),
                });
            }
            if hdr.continuation() && PAGE_SIZE - end > RECORD_HEADER_SIZE {
                return Err(FlashError::RecoverCorrupt {
                    offset: at,
                    reason: "continued fragment does not end its page".into(),
                });
            }
            let frag = &page[off + RECORD_HEADER_SIZE..end];
            match open.as_mut() {
                Some((lsn, buf, _)) => {
                    if off != 0 || hdr.lsn != *lsn {
                        out.truncated_tail = Some(format!("broken chain for lsn {lsn} at offset {at}"));
                        break 'pages;
                    }
                    buf.extend_from_slice(frag);
                }
                None => {
                    if let Some(prev) = last_lsn {
                        if hdr.lsn <= prev {
                            return Err(FlashError::RecoverCorrupt {
                                offset: at,
                                reason: format!("lsn {} does not follow {prev}", hdr.lsn),
                            });
                        }
                        if hdr.lsn != prev + 1 {
                            out.truncated_tail = Some(format!("lsn gap after {prev} at offset {at}"));
                            break 'pages;
                        }
                    }
                    open = Some((hdr.lsn, frag.to_vec(), at));
                }
            }
            off = end;
            if !hdr.continuation() {
                let (lsn, payload, _) = open.take().unwrap();
                out.records.push(FlashRecord { lsn, payload });
                last_lsn = Some(lsn);
                out.end_offset = base + off as u64;
            }
        }
        page_no += 1;
    }
    if let Some((lsn, _, start)) = open {
        out.end_offset = start;
        if out.truncated_tail.is_none() {
            out.truncated_tail = Some(format!("incomplete record for lsn {lsn}"));
        }
    }
    Ok(out)
}

/// The flashlog of one physical log.
#[derive(Debug)]
pub struct FlashLog<M: Medium> {
    medium: M,
    cfg: FlashConfig,
    segment: SegmentBuffer,
    /// File offset of `segment`.
    segment_base: u64,
    /// Bytes of `segment` already handed to a submission.
    submitted_upto: usize,
    inflight: VecDeque<Submission>,
    /// Highest LSN completely placed in a segment buffer.
    placed_lsn: Option<u64>,
    durable_lsn: Option<u64>,
    stats: FlashStats,
}

impl<M: Medium> FlashLog<M> {
    /// Opens the flashlog, preallocating the first chunk of a fresh file, and
    /// returns the recovered consistent prefix.
    pub fn open(mut medium: M, cfg: FlashConfig) -> Result<(Self, Vec<FlashRecord>), FlashError> {
        assert!(cfg.segment_bytes.is_multiple_of(PAGE_SIZE));
        assert!(cfg.prealloc_chunk.is_multiple_of(cfg.segment_bytes as u64));
        if medium.len() < cfg.prealloc_chunk {
            medium.extend_zeroed(cfg.prealloc_chunk).map_err(FlashError::ExtendFailed)?;
        }
        let scan = scan(&medium)?;
        let end = scan.end_offset;

        // Writes may have landed out of order past the valid prefix; clear
        // anything within the possible in-flight window.
        let window = (cfg.max_outstanding as u64 + 2) * cfg.segment_bytes as u64;
        let clear_end = (end + window).min(medium.len());
        let mut page = vec![0u8; PAGE_SIZE];
        let mut at = end;
        let mut dirty = false;
        while at < clear_end {
            let page_end = ((at / PAGE_SIZE as u64) + 1) * PAGE_SIZE as u64;
            let n = (page_end.min(clear_end) - at) as usize;
            medium.read_at(at, &mut page[..n])?;
            if !is_zero(&page[..n]) {
                medium.write_at(at, &vec![0u8; n])?;
                dirty = true;
            }
            at += n as u64;
        }
        if dirty {
            medium.persist(end, clear_end - end)?;
        }

        let seg = cfg.segment_bytes as u64;
        let segment_base = end / seg * seg;
        let mut segment = SegmentBuffer::new(cfg.segment_bytes);
        let fill = (end - segment_base) as usize;
        if fill > 0 {
            medium.read_at(segment_base, &mut segment.bytes[..fill])?;
        }
        segment.fill = fill;
        let last = scan.records.last().map(|r| r.lsn);
        let mut log = FlashLog {
            medium,
            cfg,
            segment,
            segment_base,
            submitted_upto: fill,
            inflight: VecDeque::new(),
            placed_lsn: last,
            durable_lsn: last,
            stats: FlashStats::default(),
        };
        log.ensure_preallocated(segment_base + seg)?;
        Ok((log, scan.records))
    }

    pub fn medium(&self) -> &M {
        &self.medium
    }

    pub fn config(&self) -> &FlashConfig {
        &self.cfg
    }

    pub fn stats(&self) -> FlashStats {
        self.stats
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.iter().filter(|s| !s.done).count()
    }

    pub fn durable_lsn(&self) -> Option<u64> {
        self.durable_lsn
    }

    pub fn placed_lsn(&self) -> Option<u64> {
        self.placed_lsn
    }

    pub fn preallocated_length(&self) -> u64 {
        self.medium.len()
    }

    /// File offset where the next byte will be placed.
    pub fn fill_position(&self) -> u64 {
        self.segment_base + self.segment.fill as u64
    }

    /// Extends the file by one preallocation chunk of zeroes.
    pub fn preallocate_extend(&mut self) -> Result<u64, FlashError> {
        let new_len = self.medium.len() + self.cfg.prealloc_chunk;
        self.medium.extend_zeroed(new_len).map_err(FlashError::ExtendFailed)?;
        self.stats.extends += 1;
        Ok(new_len)
    }

    fn ensure_preallocated(&mut self, upto: u64) -> Result<(), FlashError> {
        while self.medium.len() < upto {
            self.preallocate_extend()?;
        }
        Ok(())
    }

    fn submit(&mut self, covers: Option<u64>) {
        let start = self.submitted_upto / PAGE_SIZE * PAGE_SIZE;
        let end =
            if self.segment.is_full() { self.segment.len() } else { self.segment.fill.div_ceil(PAGE_SIZE) * PAGE_SIZE };
        if end <= start || self.segment.fill <= self.submitted_upto {
            return;
        }
        let file_offset = self.segment_base + start as u64;
        assert!(file_offset + (end - start) as u64 <= self.medium.len(), "write into non-preallocated flashlog region");
        self.inflight.push_back(Submission {
            file_offset,
            data: self.segment.bytes[start..end].to_vec(),
            covers,
            done: false,
        });
        self.submitted_upto = self.segment.fill;
        self.segment.set_state(SegmentState::Submitted);
        self.stats.submitted += 1;
        self.stats.max_in_flight = self.stats.max_in_flight.max(self.in_flight());
    }

    fn rotate(&mut self) -> Result<(), FlashError> {
        let seg = self.cfg.segment_bytes as u64;
        self.ensure_preallocated(self.segment_base + 2 * seg)?;
        self.segment_base += seg;
        self.segment = SegmentBuffer::new(self.cfg.segment_bytes);
        self.submitted_upto = 0;
        Ok(())
    }

    /// Completes the oldest outstanding write. Returns false when idle.
    pub fn complete_next(&mut self) -> Result<bool, FlashError> {
        let Some(sub) = self.inflight.iter_mut().find(|s| !s.done) else {
            return Ok(false);
        };
        self.medium.write_at(sub.file_offset, &sub.data)?;
        self.medium.persist(sub.file_offset, sub.data.len() as u64)?;
        sub.done = true;
        self.stats.completed += 1;
        self.retire_completed();
        Ok(true)
    }

    pub fn complete_all(&mut self) -> Result<(), FlashError> {
        while self.complete_next()? {}
        Ok(())
    }

    fn retire_completed(&mut self) {
        while self.inflight.front().is_some_and(|s| s.done) {
            let s = self.inflight.pop_front().unwrap();
            if s.covers.is_some() {
                self.durable_lsn = s.covers.max(self.durable_lsn);
            }
        }
        if self.inflight.is_empty() && self.submitted_upto == self.segment.fill {
            self.segment.set_state(SegmentState::Durable);
        }
    }

    /// Pending writes, oldest first, as (file offset, bytes).
    pub fn pending_writes(&self) -> Vec<(u64, Vec<u8>)> {
        self.inflight.iter().filter(|s| !s.done).map(|s| (s.file_offset, s.data.clone())).collect()
    }

    /// Moves committed entries with `lsn <= upto` from the NVM head into
    /// segment buffers, submits full segments (and the partial one when
    /// `flush`), and truncates NVM entries whose flashlog writes are durable.
    pub fn drain_step<N: Medium>(
        &mut self,
        nvm: &mut NvmRegion<N>,
        upto: Option<u64>,
        flush: bool,
    ) -> Result<DrainReport, FlashError> {
        if self.cfg.auto_complete {
            self.complete_all()?;
        }
        let mut report = DrainReport { truncated: self.truncate_nvm(nvm)?, ..Default::default() };

        let first = self.placed_lsn.map_or(nvm.head_lsn(), |l| l + 1).max(nvm.head_lsn());
        let mut next = first;
        if let Some(upto) = upto {
            let slots: Vec<_> = nvm.slots().filter(|s| s.lsn >= first && s.lsn <= upto).copied().collect();
            for slot in slots {
                debug_assert_eq!(slot.lsn, next);
                let body = nvm.read_payload(&slot)?;
                let mut record = Vec::with_capacity(16 + body.len());
                record.extend_from_slice(&slot.term.to_le_bytes());
                record.extend_from_slice(&slot.index.to_le_bytes());
                record.extend_from_slice(&body);

                let (_, end) = plan(self.segment.fill, record.len(), usize::MAX);
                let submissions = end / self.cfg.segment_bytes;
                if self.in_flight() + submissions > self.cfg.max_outstanding {
                    report.stalled = true;
                    self.stats.stalls += 1;
                    break;
                }
                if self.place_record(slot.lsn, &record).is_err() {
                    report.stalled = true;
                    break;
                }
                next = slot.lsn + 1;
            }
        }
        if flush && self.segment.fill > self.submitted_upto && self.in_flight() < self.cfg.max_outstanding {
            self.submit(self.placed_lsn);
        }
        report.drained = first..next.max(first);
        if self.cfg.auto_complete && flush {
            self.complete_all()?;
            report.truncated += self.truncate_nvm(nvm)?;
        }
        Ok(report)
    }

    fn place_record(&mut self, lsn: u64, record: &[u8]) -> Result<(), FlashError> {
        let mut rest = record;
        loop {
            if self.segment.is_full() {
                self.submit(self.placed_lsn);
                self.rotate()?;
            }
            let (_, used) = self.segment.place_prefix(lsn, rest);
            rest = &rest[used..];
            if rest.is_empty() {
                break;
            }
        }
        self.placed_lsn = Some(lsn);
        if self.segment.is_full() {
            self.submit(self.placed_lsn);
            self.rotate()?;
        }
        Ok(())
    }

    fn truncate_nvm<N: Medium>(&mut self, nvm: &mut NvmRegion<N>) -> Result<u64, FlashError> {
        match self.durable_lsn {
            Some(d) if d >= nvm.head_lsn() && nvm.next_lsn() > nvm.head_lsn() => {
                let upto = d.min(nvm.next_lsn() - 1);
                Ok(nvm.truncate_front(Some(upto))?)
            }
            _ => Ok(0),
        }
    }

    /// Rewrites the file keeping only records with `lsn > upto`. Maintenance
    /// only; not crash-atomic. Waits for outstanding writes first.
    pub fn truncate_upto(&mut self, upto: u64) -> Result<usize, FlashError> {
        self.complete_all()?;
        if self.segment.fill > self.submitted_upto {
            self.submit(self.placed_lsn);
            self.complete_all()?;
        }
        let records = scan(&self.medium)?.records;
        let keep: Vec<_> = records.into_iter().filter(|r| r.lsn > upto).collect();
        let removed_all = keep.is_empty();
        let old_end = self.fill_position();
        let zero = vec![0u8; self.cfg.segment_bytes];
        let mut at = 0;
        while at < old_end.max(self.cfg.segment_bytes as u64) {
            let n = (self.medium.len() - at).min(zero.len() as u64) as usize;
            self.medium.write_at(at, &zero[..n])?;
            at += n as u64;
        }
        self.medium.persist(0, at)?;
        self.segment = SegmentBuffer::new(self.cfg.segment_bytes);
        self.segment_base = 0;
        self.submitted_upto = 0;
        for r in &keep {
            self.place_record(r.lsn, &r.payload)?;
        }
        if self.segment.fill > 0 {
            self.submit(self.placed_lsn);
        }
        self.complete_all()?;
        if removed_all {
            self.durable_lsn = self.placed_lsn;
        }
        Ok(keep.len())
    }

    pub fn into_medium(self) -> M {
        self.medium
    }
}

/// A log entry as stored in either level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub lsn: u64,
    pub term: u64,
    pub index: u64,
    pub body: Vec<u8>,
}

impl LogRecord {
    /// Splits a flashlog record payload into its term/index prefix and body.
    pub fn from_flash(rec: &FlashRecord) -> Result<Self, FlashError> {
        if rec.payload.len() < 16 {
            return Err(FlashError::RecoverCorrupt { offset: 0, reason: format!("record {} too short", rec.lsn) });
        }
        Ok(LogRecord {
            lsn: rec.lsn,
            term: u64::from_le_bytes(rec.payload[0..8].try_into().unwrap()),
            index: u64::from_le_bytes(rec.payload[8..16].try_into().unwrap()),
            body: rec.payload[16..].to_vec(),
        })
    }
}

/// Unifies independently recovered flashlog and NVM contents: flashlog
/// records followed by NVM entries past the last flashlog LSN. Entries present
/// in both must agree byte for byte.
pub fn merge_recover(flash: &[FlashRecord], nvm: &[crate::nvm::NvmEntry]) -> Result<Vec<LogRecord>, FlashError> {
    let mut out: Vec<LogRecord> = flash.iter().map(LogRecord::from_flash).collect::<Result<_, _>>()?;
    let max_flash = out.last().map(|r| r.lsn);
    if let (Some(maxf), Some(first)) = (max_flash, nvm.first()) {
        if first.lsn > maxf + 1 {
            return Err(FlashError::RecoverInvariantViolation(format!(
                "gap between flashlog lsn {maxf} and nvm lsn {}",
                first.lsn
            )));
        }
    }
    for e in nvm {
        match max_flash {
            Some(maxf) if e.lsn <= maxf => {
                let pos = out.binary_search_by_key(&e.lsn, |r| r.lsn);
                if let Ok(i) = pos {
                    let r = &out[i];
                    if r.term != e.term || r.index != e.index || r.body != e.payload {
                        return Err(FlashError::RecoverInvariantViolation(format!(
                            "lsn {} differs between levels",
                            e.lsn
                        )));
                    }
                }
            }
            _ => out.push(LogRecord { lsn: e.lsn, term: e.term, index: e.index, body: e.payload.clone() }),
        }
    }
    Ok(out)
}

/// Result of an offline consistency check of a flashlog file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FsckReport {
    pub file_len: u64,
    pub segments: u64,
    pub pages_used: u64,
    pub fragments: u64,
    pub records: u64,
    pub lsns: Option<(u64, u64)>,
    pub indexes: Option<(u64, u64)>,
    /// Offset just past the last complete record.
    pub end_offset: u64,
    /// An incomplete tail that recovery would discard.
    pub tail: Option<String>,
    pub errors: Vec<String>,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks a flashlog file: segment sizing, page layout, LSN and index
/// sequencing, and that everything past the recovered end is zero.
pub fn fsck<M: Medium + ?Sized>(medium: &M) -> Result<FsckReport, FlashError> {
    let len = medium.len();
    let mut report = FsckReport { file_len: len, segments: len.div_ceil(SEGMENT_SIZE as u64), ..Default::default() };
    if !len.is_multiple_of(SEGMENT_SIZE as u64) {
        report.errors.push(format!("file length {len} is not a whole number of {SEGMENT_SIZE}-byte segments"));
    }
    let scanned = match scan(medium) {
        Ok(s) => s,
        Err(e) => {
            report.errors.push(e.to_string());
            return Ok(report);
        }
    };
    report.end_offset = scanned.end_offset;
    report.tail = scanned.truncated_tail.clone();
    report.records = scanned.records.len() as u64;
    if let (Some(a), Some(b)) = (scanned.records.first(), scanned.records.last()) {
        report.lsns = Some((a.lsn, b.lsn));
    }

    let mut prev: Option<LogRecord> = None;
    for rec in &scanned.records {
        let r = match LogRecord::from_flash(rec) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(e.to_string());
                continue;
            }
        };
        if let Some(p) = &prev {
            if r.index != p.index + 1 {
                report.errors.push(format!("lsn {} holds index {} after index {}", r.lsn, r.index, p.index));
            }
            if r.term < p.term {
                report.errors.push(format!("lsn {} term {} goes back from {}", r.lsn, r.term, p.term));
            }
        }
        let first = report.indexes.map_or(r.index, |(a, _)| a);
        report.indexes = Some((first, r.index));
        prev = Some(r);
    }

    // Page layout up to the recovered end; zero padding after each page's
    // last fragment.
    let mut page = vec![0u8; PAGE_SIZE];
    let used = scanned.end_offset.div_ceil(PAGE_SIZE as u64);
    report.pages_used = used;
    for p in 0..used {
        let base = p * PAGE_SIZE as u64;
        medium.read_at(base, &mut page)?;
        let mut off = 0;
        while off + RECORD_HEADER_SIZE <= PAGE_SIZE {
            let hdr = FlashRecordHeader::decode(&page[off..off + RECORD_HEADER_SIZE]);
            if hdr.size() == 0 {
                break;
            }
            let end = off + RECORD_HEADER_SIZE + hdr.size() as usize;
            if end > PAGE_SIZE {
                report.errors.push(format!("fragment at {} crosses a page boundary", base + off as u64));
                break;
            }
            report.fragments += 1;
            off = end;
        }
        let last_page = p + 1 == used;
        if off < PAGE_SIZE && !is_zero(&page[off..]) && !(last_page && report.tail.is_some()) {
            report.errors.push(format!("non-zero padding in page at {base}"));
        }
    }
    if report.tail.is_none() {
        let mut at = used * PAGE_SIZE as u64;
        while at < len {
            let n = (len - at).min(PAGE_SIZE as u64) as usize;
            medium.read_at(at, &mut page[..n])?;
            if !is_zero(&page[..n]) {
                report.errors.push(format!("data past the end of the log at offset {at}"));
                break;
            }
            at += n as u64;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::MemMedium;
    use crate::nvm::{NvmConfig, NvmEntry};

    /// Independent layout check: parse raw bytes page by page and confirm
    /// every header+fragment stays within one 4096-byte page.
    fn fragments_in(bytes: &[u8]) -> Vec<(usize, usize, bool, u64)> {
        let mut out = Vec::new();
        for (p, page) in bytes.chunks(PAGE_SIZE).enumerate() {
            let mut off = 0;
            while off + RECORD_HEADER_SIZE <= PAGE_SIZE {
                let raw = u32::from_le_bytes(page[off..off + 4].try_into().unwrap());
                let size = (raw & 0x7fff_ffff) as usize;
                if size == 0 {
                    break;
                }
                let lsn = u64::from_le_bytes(page[off + 4..off + 12].try_into().unwrap());
                out.push((p * PAGE_SIZE + off, size, raw >> 31 == 1, lsn));
                off += RECORD_HEADER_SIZE + size;
            }
        }
        out
    }

    fn within_page(start: usize, end: usize) -> bool {
        start / PAGE_SIZE == (end - 1) / PAGE_SIZE
    }

    #[test]
    fn small_payload_single_fragment() {
        let mut seg = SegmentBuffer::default();
        let p = segment_place(&mut seg, 0, &[1u8; 100]).unwrap();
        assert_eq!(p, vec![Placement { offset: 0, fragment_size: 100, continuation: false }]);
    }

    #[test]
    fn payload_split_when_page_nearly_full() {
        let mut seg = SegmentBuffer::default();
        // Leave exactly 60 bytes in the first page.
        let filler = PAGE_SIZE - 60 - RECORD_HEADER_SIZE;
        segment_place(&mut seg, 0, &vec![9u8; filler]).unwrap();
        assert_eq!(seg.fill_offset(), PAGE_SIZE - 60);
        let p = segment_place(&mut seg, 1, &[1u8; 100]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0], Placement { offset: (PAGE_SIZE - 60) as u32, fragment_size: 48, continuation: true });
        assert_eq!(p[1], Placement { offset: PAGE_SIZE as u32, fragment_size: 52, continuation: false });
        for (off, size, _, _) in fragments_in(seg.bytes()) {
            assert!(within_page(off, off + RECORD_HEADER_SIZE + size));
        }
    }

    #[test]
    fn large_payload_fragments_on_page_boundaries() {
        let mut seg = SegmentBuffer::default();
        let p = segment_place(&mut seg, 3, &[7u8; 6000]).unwrap();
        assert!(p.len() >= 2);
        for w in p.windows(2) {
            assert!(w[0].continuation);
            assert_eq!(w[1].offset as usize % PAGE_SIZE, 0);
        }
        assert!(!p.last().unwrap().continuation);
        let frags = fragments_in(seg.bytes());
        assert_eq!(frags.iter().map(|f| f.1).sum::<usize>(), 6000);
    }

    #[test]
    fn segment_full_leaves_buffer_unchanged() {
        let mut seg = SegmentBuffer::new(PAGE_SIZE);
        segment_place(&mut seg, 0, &[1u8; 4000]).unwrap();
        let fill = seg.fill_offset();
        assert!(matches!(segment_place(&mut seg, 1, &[1u8; 200]), Err(FlashError::SegmentFull)));
        assert_eq!(seg.fill_offset(), fill);
    }

    #[test]
    fn fresh_file_scans_empty() {
        let m = MemMedium::new(0);
        let cfg = FlashConfig { prealloc_chunk: SEGMENT_SIZE as u64 * 4, ..Default::default() };
        let (log, recs) = FlashLog::open(m, cfg).unwrap();
        assert!(recs.is_empty());
        assert_eq!(log.preallocated_length(), SEGMENT_SIZE as u64 * 4);
    }

    fn nvm() -> NvmRegion<MemMedium> {
        let cfg = NvmConfig { region_bytes: 256 * 1024, ring_capacity: 64, max_entry: 9000, reserve_slots: 0 };
        NvmRegion::open_or_format(MemMedium::new(cfg.region_bytes), cfg).unwrap()
    }

    fn flash(chunk_segments: u64) -> (MemMedium, FlashLog<MemMedium>) {
        let m = MemMedium::new(0);
        let cfg = FlashConfig { prealloc_chunk: SEGMENT_SIZE as u64 * chunk_segments, ..Default::default() };
        let (f, _) = FlashLog::open(m.clone(), cfg).unwrap();
        (m, f)
    }

    #[test]
    fn drain_empty_is_empty() {
        let mut n = nvm();
        let (_, mut f) = flash(2);
        let r = f.drain_step(&mut n, None, true).unwrap();
        assert!(r.drained.is_empty());
        assert_eq!(r.truncated, 0);
    }

    #[test]
    fn drain_ten_then_recover() {
        let mut n = nvm();
        let (m, mut f) = flash(2);
        let mut shadow = Vec::new();
        for i in 0..10u64 {
            let body = format!("entry-{i}").into_bytes();
            n.append(1, i + 1, &body).unwrap();
            shadow.push(body);
        }
        let r = f.drain_step(&mut n, Some(9), true).unwrap();
        assert_eq!(r.drained, 0..10);
        assert_eq!(n.head_lsn(), 10);
        assert!(n.is_empty());
        let recs = scan(&m).unwrap().records;
        let bodies: Vec<_> = recs.iter().map(|r| LogRecord::from_flash(r).unwrap().body).collect();
        assert_eq!(bodies, shadow);
    }

    #[test]
    fn drain_stalls_at_outstanding_bound() {
        let mut n = NvmRegion::open_or_format(
            MemMedium::new(8 << 20),
            NvmConfig { region_bytes: 8 << 20, ring_capacity: 1024, max_entry: 9000, reserve_slots: 0 },
        )
        .unwrap();
        let m = MemMedium::new(0);
        let cfg = FlashConfig {
            prealloc_chunk: SEGMENT_SIZE as u64 * 64,
            auto_complete: false,
            max_outstanding: 4,
            ..Default::default()
        };
        let (mut f, _) = FlashLog::open(m, cfg).unwrap();
        for i in 0..200u64 {
            n.append(1, i + 1, &[i as u8; 8000]).unwrap();
        }
        let r = f.drain_step(&mut n, Some(199), false).unwrap();
        assert!(r.stalled);
        assert_eq!(f.in_flight(), 4);
        assert!(f.stats().max_in_flight <= 4);
        let r2 = f.drain_step(&mut n, Some(199), false).unwrap();
        assert!(r2.drained.is_empty());
        f.complete_all().unwrap();
        let r3 = f.drain_step(&mut n, Some(199), false).unwrap();
        assert!(r3.truncated > 0);
        assert!(!r3.drained.is_empty());
    }

    #[test]
    fn extend_zero_fills_and_keeps_records() {
        let mut n = nvm();
        let (m, mut f) = flash(1);
        n.append(1, 1, b"keep").unwrap();
        f.drain_step(&mut n, Some(0), true).unwrap();
        let before = scan(&m).unwrap().records;
        let len = f.preallocate_extend().unwrap();
        assert_eq!(len, 2 * SEGMENT_SIZE as u64);
        let mut tail = vec![1u8; SEGMENT_SIZE];
        m.read_at(SEGMENT_SIZE as u64, &mut tail).unwrap();
        assert!(is_zero(&tail));
        m.crash();
        let (_, recs) = FlashLog::open(m, *f.config()).unwrap();
        assert_eq!(recs, before);
    }

    #[test]
    #[should_panic(expected = "non-preallocated")]
    fn write_past_preallocation_is_rejected() {
        let m = MemMedium::new(0);
        let cfg = FlashConfig { prealloc_chunk: SEGMENT_SIZE as u64, ..Default::default() };
        let (mut f, _) = FlashLog::open(m, cfg).unwrap();
        f.segment_base = SEGMENT_SIZE as u64;
        f.segment.place(0, b"x").unwrap();
        f.submit(Some(0));
    }

    #[test]
    fn merge_takes_overlap_once() {
        let flash: Vec<FlashRecord> = (0..10u64)
            .map(|l| {
                let mut p = 1u64.to_le_bytes().to_vec();
                p.extend_from_slice(&(l + 1).to_le_bytes());
                p.extend_from_slice(&[l as u8]);
                FlashRecord { lsn: l, payload: p }
            })
            .collect();
        let nvm: Vec<NvmEntry> =
            (8..13u64).map(|l| NvmEntry { lsn: l, term: 1, index: l + 1, payload: vec![l as u8] }).collect();
        let merged = merge_recover(&flash, &nvm).unwrap();
        assert_eq!(merged.iter().map(|r| r.lsn).collect::<Vec<_>>(), (0..13).collect::<Vec<_>>());
        assert_eq!(merge_recover(&[], &nvm[..]).unwrap().len(), 5);
        assert!(merge_recover(&[], &[]).unwrap().is_empty());
        let gap: Vec<NvmEntry> = nvm.iter().filter(|e| e.lsn >= 11).cloned().collect();
        assert!(matches!(merge_recover(&flash, &gap), Err(FlashError::RecoverInvariantViolation(_))));
    }

    #[test]
    fn interior_boundary_violation_is_corrupt() {
        let mut img = vec![0u8; PAGE_SIZE * 2];
        let hdr = FlashRecordHeader::new(5000, false, 0);
        img[0..12].copy_from_slice(&hdr.encode());
        let m = MemMedium::from_image(img);
        assert!(matches!(scan(&m), Err(FlashError::RecoverCorrupt { .. })));
    }
}
