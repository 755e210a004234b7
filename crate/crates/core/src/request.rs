//! Client request and response encoding.
//!
//! A request travels as one opaque [`Payload`]: the server chains the very
//! same buffer into a log entry, so the state machine decodes it only at apply
//! time.

use std::ops::Range;

use thiserror::Error;

use crate::payload::Payload;

pub type LogId = u16;
pub type ClientId = u32;

pub const MAX_KEY: usize = 4096;
pub const MAX_VALUE: usize = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("buffer truncated")]
    Truncated,
    #[error("unknown tag {0}")]
    BadTag(u8),
    #[error("{0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpKind {
    Get = 1,
    Put = 2,
    Delete = 3,
    WeakGet = 4,
    Gang = 5,
    Snapshot = 6,
}

impl OpKind {
    fn from_u8(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            1 => OpKind::Get,
            2 => OpKind::Put,
            3 => OpKind::Delete,
            4 => OpKind::WeakGet,
            5 => OpKind::Gang,
            6 => OpKind::Snapshot,
            t => return Err(DecodeError::BadTag(t)),
        })
    }
}

/// A single mutation inside a ganged batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteOp {
    Put { key: Vec<u8>, value: Vec<u8> },
    Delete { key: Vec<u8> },
}

impl WriteOp {
    pub fn key(&self) -> &[u8] {
        match self {
            WriteOp::Put { key, .. } | WriteOp::Delete { key } => key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GangSection {
    pub log: LogId,
    pub ops: Vec<WriteOp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Get { key: Vec<u8> },
    Put { key: Vec<u8>, value: Vec<u8> },
    Delete { key: Vec<u8> },
    WeakGet { key: Vec<u8> },
    Gang { sections: Vec<GangSection> },
    Snapshot,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Get { .. } => OpKind::Get,
            Op::Put { .. } => OpKind::Put,
            Op::Delete { .. } => OpKind::Delete,
            Op::WeakGet { .. } => OpKind::WeakGet,
            Op::Gang { .. } => OpKind::Gang,
            Op::Snapshot => OpKind::Snapshot,
        }
    }

    pub fn key(&self) -> Option<&[u8]> {
        match self {
            Op::Get { key } | Op::Put { key, .. } | Op::Delete { key } | Op::WeakGet { key } => Some(key),
            _ => None,
        }
    }

    pub fn is_ganged(&self) -> bool {
        matches!(self, Op::Gang { .. } | Op::Snapshot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub client: ClientId,
    pub seq: u64,
    pub op: Op,
}

pub const REQUEST_HEADER: usize = 13;

impl Request {
    pub fn encode(&self) -> Payload {
        let mut b = Vec::with_capacity(64);
        b.extend_from_slice(&self.client.to_le_bytes());
        b.extend_from_slice(&self.seq.to_le_bytes());
        b.push(self.op.kind() as u8);
        match &self.op {
            Op::Get { key } | Op::Delete { key } | Op::WeakGet { key } => put_key(&mut b, key),
            Op::Put { key, value } => {
                put_key(&mut b, key);
                put_value(&mut b, value);
            }
            Op::Gang { sections } => {
                b.extend_from_slice(&(sections.len() as u16).to_le_bytes());
                for s in sections {
                    let body = encode_write_ops(&s.ops);
                    b.extend_from_slice(&s.log.to_le_bytes());
                    b.extend_from_slice(&(body.len() as u32).to_le_bytes());
                    b.extend_from_slice(&body);
                }
            }
            Op::Snapshot => {}
        }
        Payload::from_vec(b)
    }

    pub fn decode(b: &[u8]) -> Result<Request, DecodeError> {
        let mut r = Reader::new(b);
        let client = r.u32()?;
        let seq = r.u64()?;
        let kind = OpKind::from_u8(r.u8()?)?;
        let op = match kind {
            OpKind::Get => Op::Get { key: r.key()? },
            OpKind::Delete => Op::Delete { key: r.key()? },
            OpKind::WeakGet => Op::WeakGet { key: r.key()? },
            OpKind::Put => Op::Put { key: r.key()?, value: r.value()? },
            OpKind::Gang => {
                let mut sections = Vec::new();
                for (log, range) in gang_sections(b)? {
                    sections.push(GangSection { log, ops: decode_write_ops(&b[range])? });
                }
                Op::Gang { sections }
            }
            OpKind::Snapshot => Op::Snapshot,
        };
        Ok(Request { client, seq, op })
    }
}

/// Reads `(client, seq, kind)` without decoding the body.
pub fn peek_header(b: &[u8]) -> Result<(ClientId, u64, OpKind), DecodeError> {
    let mut r = Reader::new(b);
    Ok((r.u32()?, r.u64()?, OpKind::from_u8(r.u8()?)?))
}

/// Locates the per-log sections of an encoded ganged request.
pub fn gang_sections(b: &[u8]) -> Result<Vec<(LogId, Range<usize>)>, DecodeError> {
    let mut r = Reader::new(b);
    r.skip(REQUEST_HEADER)?;
    let n = r.u16()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let log = r.u16()?;
        let len = r.u32()? as usize;
        let start = r.pos;
        r.skip(len)?;
        if out.iter().any(|(l, _)| *l == log) {
            return Err(DecodeError::Invalid("duplicate gang section"));
        }
        out.push((log, start..start + len));
    }
    Ok(out)
}

pub fn encode_write_ops(ops: &[WriteOp]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&(ops.len() as u16).to_le_bytes());
    for op in ops {
        match op {
            WriteOp::Put { key, value } => {
                b.push(OpKind::Put as u8);
                put_key(&mut b, key);
                put_value(&mut b, value);
            }
            WriteOp::Delete { key } => {
                b.push(OpKind::Delete as u8);
                put_key(&mut b, key);
            }
        }
    }
    b
}

pub fn decode_write_ops(b: &[u8]) -> Result<Vec<WriteOp>, DecodeError> {
    if b.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = Reader::new(b);
    let n = r.u16()?;
    let mut ops = Vec::with_capacity(n as usize);
    for _ in 0..n {
        ops.push(match OpKind::from_u8(r.u8()?)? {
            OpKind::Put => WriteOp::Put { key: r.key()?, value: r.value()? },
            OpKind::Delete => WriteOp::Delete { key: r.key()? },
            _ => return Err(DecodeError::Invalid("only put/delete allowed in a gang")),
        });
    }
    Ok(ops)
}

fn put_key(b: &mut Vec<u8>, key: &[u8]) {
    b.extend_from_slice(&(key.len() as u16).to_le_bytes());
    b.extend_from_slice(key);
}

fn put_value(b: &mut Vec<u8>, v: &[u8]) {
    b.extend_from_slice(&(v.len() as u32).to_le_bytes());
    b.extend_from_slice(v);
}

/// Outcome codes carried by client responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    /// The contacted replica is not the leader; `leader_hint` may name one.
    NotLeader = 2,
    /// The replica's term is older than the client's session term.
    StaleLeader = 3,
    LogFull = 4,
    NotColocated = 5,
    /// A ganged operation failed and was applied nowhere.
    GangRetry = 6,
    /// A parked weak read timed out waiting for the apply cursor.
    Busy = 7,
    Invalid = 8,
    /// Client-side only: the retry budget ran out.
    Unavailable = 9,
}

impl Status {
    pub fn from_u8(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            0 => Status::Ok,
            1 => Status::NotFound,
            2 => Status::NotLeader,
            3 => Status::StaleLeader,
            4 => Status::LogFull,
            5 => Status::NotColocated,
            6 => Status::GangRetry,
            7 => Status::Busy,
            8 => Status::Invalid,
            9 => Status::Unavailable,
            t => return Err(DecodeError::BadTag(t)),
        })
    }

    /// Statuses the client re-dispatches after a backoff.
    pub fn is_retryable(self) -> bool {
        matches!(self, Status::LogFull | Status::NotColocated | Status::GangRetry | Status::Busy)
    }

    /// Final outcomes of an operation.
    pub fn is_final(self) -> bool {
        matches!(self, Status::Ok | Status::NotFound | Status::Invalid | Status::Unavailable)
    }
}

/// Little-endian cursor shared by the decoders.
pub(crate) struct Reader<'a> {
    b: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(b: &'a [u8]) -> Self {
        Reader { b, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.b.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated);
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn skip(&mut self, n: usize) -> Result<(), DecodeError> {
        self.take(n).map(|_| ())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn key(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u16()? as usize;
        if n > MAX_KEY {
            return Err(DecodeError::Invalid("key too long"));
        }
        Ok(self.take(n)?.to_vec())
    }

    fn value(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u32()? as usize;
        if n > MAX_VALUE {
            return Err(DecodeError::Invalid("value too long"));
        }
        Ok(self.take(n)?.to_vec())
    }
}
