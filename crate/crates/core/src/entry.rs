//! Replicated log entries and their byte encoding.
//!
//! The same body encoding is used for the NVM log, the flashlog and the wire.
//! Encoding is a gather list of slices, so the persistent copy is written
//! straight from the received packet buffers.

use std::ops::Range;
use std::sync::Arc;

use crate::ganged::{GangStamp, Nonce};
use crate::payload::Payload;
use crate::request::{DecodeError, LogId, Reader};

const KIND_NOOP: u8 = 0;
const KIND_BATCH: u8 = 1;
const KIND_GANG: u8 = 2;

/// Section of a ganged request executed by one log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GangPart {
    pub stamp: Arc<GangStamp>,
    /// The whole client request, shared with every participant.
    pub request: Payload,
    /// This log's section inside `request`.
    pub section: Range<u32>,
}

impl GangPart {
    pub fn section_bytes(&self) -> &[u8] {
        &self.request[self.section.start as usize..self.section.end as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryBody {
    /// Appended by a new leader to commit entries from earlier terms.
    Noop,
    /// One or more client request packets, applied in order.
    Batch(Vec<Payload>),
    Gang(GangPart),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub term: u64,
    pub index: u64,
    pub body: EntryBody,
}

impl LogEntry {
    pub fn noop(term: u64, index: u64) -> Self {
        LogEntry { term, index, body: EntryBody::Noop }
    }

    /// Number of client requests carried.
    pub fn request_count(&self) -> usize {
        match &self.body {
            EntryBody::Noop => 0,
            EntryBody::Batch(v) => v.len(),
            EntryBody::Gang(_) => 1,
        }
    }

    /// Encoded body length.
    pub fn body_len(&self) -> usize {
        match &self.body {
            EntryBody::Noop => 1,
            EntryBody::Batch(v) => 3 + v.iter().map(|p| 4 + p.len()).sum::<usize>(),
            EntryBody::Gang(g) => 1 + g.stamp.encoded_len() + 4 + g.section.len(),
        }
    }

    /// Calls `f` with the body encoding as a sequence of slices.
    pub fn gather<R>(&self, f: impl FnOnce(&[&[u8]]) -> R) -> R {
        match &self.body {
            EntryBody::Noop => f(&[&[KIND_NOOP]]),
            EntryBody::Batch(reqs) => {
                let mut head = vec![KIND_BATCH];
                head.extend_from_slice(&(reqs.len() as u16).to_le_bytes());
                let lens: Vec<[u8; 4]> = reqs.iter().map(|p| (p.len() as u32).to_le_bytes()).collect();
                let mut chunks: Vec<&[u8]> = Vec::with_capacity(1 + 2 * reqs.len());
                chunks.push(&head);
                for (p, l) in reqs.iter().zip(&lens) {
                    chunks.push(l);
                    chunks.push(p);
                }
                f(&chunks)
            }
            EntryBody::Gang(g) => {
                let mut head = vec![KIND_GANG];
                g.stamp.encode_into(&mut head);
                head.extend_from_slice(&(g.section.len() as u32).to_le_bytes());
                f(&[&head, g.section_bytes()])
            }
        }
    }

    /// Payload handles to keep alive while the entry's bytes are in flight.
    pub fn holds(&self) -> Vec<Payload> {
        match &self.body {
            EntryBody::Noop => Vec::new(),
            EntryBody::Batch(v) => v.clone(),
            EntryBody::Gang(g) => vec![g.request.clone()],
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        self.gather(|chunks| chunks.concat())
    }

    pub fn decode_body(term: u64, index: u64, b: &[u8]) -> Result<LogEntry, DecodeError> {
        let mut r = Reader::new(b);
        let body = match r.u8()? {
            KIND_NOOP => EntryBody::Noop,
            KIND_BATCH => {
                let n = r.u16()?;
                let mut v = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    v.push(Payload::from(r.take(len)?));
                }
                EntryBody::Batch(v)
            }
            KIND_GANG => {
                let stamp = GangStamp::decode(&mut r)?;
                let len = r.u32()? as usize;
                let bytes = r.take(len)?;
                EntryBody::Gang(GangPart {
                    stamp: Arc::new(stamp),
                    request: Payload::from(bytes),
                    section: 0..len as u32,
                })
            }
            t => return Err(DecodeError::BadTag(t)),
        };
        if r.remaining() != 0 {
            return Err(DecodeError::Invalid("trailing bytes in entry"));
        }
        Ok(LogEntry { term, index, body })
    }

    /// Content digest independent of buffer identity.
    pub fn digest(&self) -> u64 {
        let mut h = xxhash_rust::xxh64::Xxh64::new(self.term ^ self.index.rotate_left(32));
        self.gather(|chunks| chunks.iter().for_each(|c| h.update(c)));
        h.digest()
    }

    pub fn gang(&self) -> Option<&GangPart> {
        match &self.body {
            EntryBody::Gang(g) => Some(g),
            _ => None,
        }
    }
}

impl GangStamp {
    pub fn encoded_len(&self) -> usize {
        Nonce::ENCODED_LEN + 4 + 8 + 1 + 2 + self.view.len() * 10
    }

    pub fn encode_into(&self, b: &mut Vec<u8>) {
        b.extend_from_slice(&self.nonce.encode());
        b.extend_from_slice(&self.client.to_le_bytes());
        b.extend_from_slice(&self.seq.to_le_bytes());
        b.push(self.snapshot as u8);
        b.extend_from_slice(&(self.view.len() as u16).to_le_bytes());
        for (log, term) in &self.view {
            b.extend_from_slice(&log.to_le_bytes());
            b.extend_from_slice(&term.to_le_bytes());
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<GangStamp, DecodeError> {
        let nonce = Nonce::decode(r.take(Nonce::ENCODED_LEN)?);
        let client = r.u32()?;
        let seq = r.u64()?;
        let snapshot = r.u8()? != 0;
        let n = r.u16()?;
        let mut view: Vec<(LogId, u64)> = Vec::with_capacity(n as usize);
        for _ in 0..n {
            view.push((r.u16()?, r.u64()?));
        }
        Ok(GangStamp { nonce, client, seq, snapshot, view })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stamp() -> Arc<GangStamp> {
        Arc::new(GangStamp {
            nonce: Nonce { machine: 0xABCDEF, ticks: 99 },
            client: 3,
            seq: 4,
            snapshot: false,
            view: vec![(0, 5), (2, 7)],
        })
    }

    #[test]
    fn bodies_roundtrip() {
        let req = Payload::from_vec((0u8..40).collect());
        let entries = [
            LogEntry::noop(3, 1),
            LogEntry {
                term: 3,
                index: 2,
                body: EntryBody::Batch(vec![Payload::from_vec(vec![1, 2]), Payload::empty()]),
            },
            LogEntry {
                term: 4,
                index: 3,
                body: EntryBody::Gang(GangPart { stamp: stamp(), request: req.clone(), section: 10..20 }),
            },
        ];
        for e in &entries {
            let b = e.encode_body();
            assert_eq!(b.len(), e.body_len());
            let d = LogEntry::decode_body(e.term, e.index, &b).unwrap();
            assert_eq!(d.digest(), e.digest());
            assert_eq!(d.encode_body(), b);
        }
        let g = LogEntry::decode_body(4, 3, &entries[2].encode_body()).unwrap();
        assert_eq!(g.gang().unwrap().section_bytes(), &req[10..20]);
    }

    #[test]
    fn digest_ignores_buffer_identity() {
        let a = Payload::from_vec(vec![9; 16]);
        let e1 = LogEntry { term: 1, index: 1, body: EntryBody::Batch(vec![a.clone()]) };
        let e2 = LogEntry { term: 1, index: 1, body: EntryBody::Batch(vec![Payload::from(&a[..])]) };
        assert_eq!(e1.digest(), e2.digest());
        let e3 = LogEntry { term: 2, ..e1.clone() };
        assert_ne!(e1.digest(), e3.digest());
    }
}
