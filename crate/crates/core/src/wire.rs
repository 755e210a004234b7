//! Message taxonomy and the datagram encoding.
//!
//! Every datagram starts with a fixed 22-byte header:
//!
//! ```text
//! version u8 | msg_type u8 | term u64 | instance u16 | src (kind u8, id u32) | dst (kind u8, id u32)
//! ```
//!
//! followed by a type-specific body. In process, messages carry [`Payload`]
//! handles and are never serialized; the encoding is used by the UDP backend
//! and to size packets against the MTU.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use crate::entry::{GangPart, LogEntry};
use crate::ganged::GangStamp;
use crate::payload::Payload;
use crate::request::{ClientId, DecodeError, LogId, Reader, Status};

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
pub const DEFAULT_MTU: usize = 9000;

pub type NodeId = u16;

/// A transport endpoint: a replica process or a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum Addr {
    Node(NodeId),
    Client(ClientId),
}

impl Addr {
    fn encode(self, b: &mut Vec<u8>) {
        match self {
            Addr::Node(n) => {
                b.push(0);
                b.extend_from_slice(&(n as u32).to_le_bytes());
            }
            Addr::Client(c) => {
                b.push(1);
                b.extend_from_slice(&c.to_le_bytes());
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Addr, DecodeError> {
        let kind = r.u8()?;
        let id = r.u32()?;
        match kind {
            0 => Ok(Addr::Node(u16::try_from(id).map_err(|_| DecodeError::Invalid("node id"))?)),
            1 => Ok(Addr::Client(id)),
            t => Err(DecodeError::BadTag(t)),
        }
    }

    pub fn node(self) -> Option<NodeId> {
        match self {
            Addr::Node(n) => Some(n),
            Addr::Client(_) => None,
        }
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Node(n) => write!(f, "n{n}"),
            Addr::Client(c) => write!(f, "c{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[repr(u8)]
pub enum MsgType {
    ClientRequest = 1,
    ClientResponse = 2,
    AppendEntries = 3,
    AppendResponse = 4,
    RequestVote = 5,
    VoteResponse = 6,
    Redirect = 7,
    Campaign = 8,
    GangFanIn = 9,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// `term` in the packet header carries the client's session term.
    ClientRequest {
        request: Payload,
    },
    ClientResponse {
        seq: u64,
        status: Status,
        value: Option<Payload>,
    },
    AppendEntries {
        prev_index: u64,
        prev_term: u64,
        commit: u64,
        entries: Vec<LogEntry>,
    },
    /// On success `last_index` is the highest index now matching the leader.
    /// On failure it is the follower's last index, as a hint.
    AppendResponse {
        success: bool,
        last_index: u64,
        full: bool,
    },
    RequestVote {
        last_index: u64,
        last_term: u64,
    },
    VoteResponse {
        granted: bool,
    },
    /// The sender does not lead this log; `leader` names one if known.
    Redirect {
        seq: u64,
        leader: Option<NodeId>,
    },
    /// Asks the receiving instance to start an election now.
    Campaign,
    /// Intra-node hand-off of one section of a ganged request.
    GangFanIn {
        stamp: Arc<GangStamp>,
        request: Payload,
        section: Range<u32>,
    },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::ClientRequest { .. } => MsgType::ClientRequest,
            Message::ClientResponse { .. } => MsgType::ClientResponse,
            Message::AppendEntries { .. } => MsgType::AppendEntries,
            Message::AppendResponse { .. } => MsgType::AppendResponse,
            Message::RequestVote { .. } => MsgType::RequestVote,
            Message::VoteResponse { .. } => MsgType::VoteResponse,
            Message::Redirect { .. } => MsgType::Redirect,
            Message::Campaign => MsgType::Campaign,
            Message::GangFanIn { .. } => MsgType::GangFanIn,
        }
    }

    fn body_len(&self) -> usize {
        match self {
            Message::ClientRequest { request } => 4 + request.len(),
            Message::ClientResponse { value, .. } => 8 + 1 + 1 + 4 + value.as_ref().map_or(0, |v| v.len()),
            Message::AppendEntries { entries, .. } => 24 + 2 + entries.iter().map(|e| 20 + e.body_len()).sum::<usize>(),
            Message::AppendResponse { .. } => 1 + 8 + 1,
            Message::RequestVote { .. } => 16,
            Message::VoteResponse { .. } => 1,
            Message::Redirect { .. } => 8 + 1 + 2,
            Message::Campaign => 0,
            Message::GangFanIn { stamp, section, .. } => stamp.encoded_len() + 4 + section.len(),
        }
    }

    /// Payload handles referenced by this message.
    pub fn payloads(&self) -> Vec<&Payload> {
        match self {
            Message::ClientRequest { request } => vec![request],
            Message::ClientResponse { value: Some(v), .. } => vec![v],
            Message::AppendEntries { entries, .. } => entries
                .iter()
                .flat_map(|e| match &e.body {
                    crate::entry::EntryBody::Batch(v) => v.iter().collect::<Vec<_>>(),
                    crate::entry::EntryBody::Gang(g) => vec![&g.request],
                    crate::entry::EntryBody::Noop => Vec::new(),
                })
                .collect(),
            Message::GangFanIn { request, .. } => vec![request],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub src: Addr,
    pub dst: Addr,
    /// Physical log (RAFT instance) the packet belongs to.
    pub log: LogId,
    pub term: u64,
    pub msg: Message,
}

impl Packet {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.msg.body_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.wire_len());
        b.push(WIRE_VERSION);
        b.push(self.msg.msg_type() as u8);
        b.extend_from_slice(&self.term.to_le_bytes());
        b.extend_from_slice(&self.log.to_le_bytes());
        self.src.encode(&mut b);
        self.dst.encode(&mut b);
        match &self.msg {
            Message::ClientRequest { request } => {
                b.extend_from_slice(&(request.len() as u32).to_le_bytes());
                b.extend_from_slice(request);
            }
            Message::ClientResponse { seq, status, value } => {
                b.extend_from_slice(&seq.to_le_bytes());
                b.push(*status as u8);
                b.push(value.is_some() as u8);
                let v = value.as_ref().map_or(&[][..], |v| v.as_slice());
                b.extend_from_slice(&(v.len() as u32).to_le_bytes());
                b.extend_from_slice(v);
            }
            Message::AppendEntries { prev_index, prev_term, commit, entries } => {
                b.extend_from_slice(&prev_index.to_le_bytes());
                b.extend_from_slice(&prev_term.to_le_bytes());
                b.extend_from_slice(&commit.to_le_bytes());
                b.extend_from_slice(&(entries.len() as u16).to_le_bytes());
                for e in entries {
                    b.extend_from_slice(&e.term.to_le_bytes());
                    b.extend_from_slice(&e.index.to_le_bytes());
                    b.extend_from_slice(&(e.body_len() as u32).to_le_bytes());
                    e.gather(|chunks| chunks.iter().for_each(|c| b.extend_from_slice(c)));
                }
            }
            Message::AppendResponse { success, last_index, full } => {
                b.push(*success as u8);
                b.extend_from_slice(&last_index.to_le_bytes());
                b.push(*full as u8);
            }
            Message::RequestVote { last_index, last_term } => {
                b.extend_from_slice(&last_index.to_le_bytes());
                b.extend_from_slice(&last_term.to_le_bytes());
            }
            Message::VoteResponse { granted } => b.push(*granted as u8),
            Message::Redirect { seq, leader } => {
                b.extend_from_slice(&seq.to_le_bytes());
                b.push(leader.is_some() as u8);
                b.extend_from_slice(&leader.unwrap_or(0).to_le_bytes());
            }
            Message::Campaign => {}
            Message::GangFanIn { stamp, request, section } => {
                stamp.encode_into(&mut b);
                b.extend_from_slice(&(section.len() as u32).to_le_bytes());
                b.extend_from_slice(&request[section.start as usize..section.end as usize]);
            }
        }
        debug_assert_eq!(b.len(), self.wire_len());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Packet, DecodeError> {
        let mut r = Reader::new(b);
        if r.u8()? != WIRE_VERSION {
            return Err(DecodeError::Invalid("wire version"));
        }
        let ty = r.u8()?;
        let term = r.u64()?;
        let log = r.u16()?;
        let src = Addr::decode(&mut r)?;
        let dst = Addr::decode(&mut r)?;
        let msg = match ty {
            1 => {
                let n = r.u32()? as usize;
                Message::ClientRequest { request: Payload::from(r.take(n)?) }
            }
            2 => {
                let seq = r.u64()?;
                let status = Status::from_u8(r.u8()?)?;
                let has = r.u8()? != 0;
                let n = r.u32()? as usize;
                let v = r.take(n)?;
                Message::ClientResponse { seq, status, value: has.then(|| Payload::from(v)) }
            }
            3 => {
                let prev_index = r.u64()?;
                let prev_term = r.u64()?;
                let commit = r.u64()?;
                let n = r.u16()?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let term = r.u64()?;
                    let index = r.u64()?;
                    let len = r.u32()? as usize;
                    entries.push(LogEntry::decode_body(term, index, r.take(len)?)?);
                }
                Message::AppendEntries { prev_index, prev_term, commit, entries }
            }
            4 => Message::AppendResponse { success: r.u8()? != 0, last_index: r.u64()?, full: r.u8()? != 0 },
            5 => Message::RequestVote { last_index: r.u64()?, last_term: r.u64()? },
            6 => Message::VoteResponse { granted: r.u8()? != 0 },
            7 => {
                let seq = r.u64()?;
                let has = r.u8()? != 0;
                let leader = r.u16()?;
                Message::Redirect { seq, leader: has.then_some(leader) }
            }
            8 => Message::Campaign,
            9 => {
                let stamp = GangStamp::decode(&mut r)?;
                let n = r.u32()? as usize;
                let part =
                    GangPart { stamp: Arc::new(stamp), request: Payload::from(r.take(n)?), section: 0..n as u32 };
                Message::GangFanIn { stamp: part.stamp, request: part.request, section: part.section }
            }
            t => return Err(DecodeError::BadTag(t)),
        };
        if r.remaining() != 0 {
            return Err(DecodeError::Invalid("trailing bytes"));
        }
        Ok(Packet { src, dst, log, term, msg })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entry::EntryBody;
    use crate::ganged::Nonce;

    fn pk(msg: Message) -> Packet {
        Packet { src: Addr::Node(2), dst: Addr::Client(77), log: 5, term: 9, msg }
    }

    #[test]
    fn every_message_roundtrips() {
        let stamp = Arc::new(GangStamp {
            nonce: Nonce { machine: 5, ticks: 6 },
            client: 1,
            seq: 2,
            snapshot: true,
            view: vec![(0, 1), (1, 1)],
        });
        let msgs = vec![
            Message::ClientRequest { request: Payload::from_vec(vec![1, 2, 3]) },
            Message::ClientResponse { seq: 4, status: Status::NotFound, value: None },
            Message::ClientResponse { seq: 4, status: Status::Ok, value: Some(Payload::from_vec(vec![8; 20])) },
            Message::AppendEntries {
                prev_index: 10,
                prev_term: 2,
                commit: 9,
                entries: vec![
                    LogEntry::noop(3, 11),
                    LogEntry { term: 3, index: 12, body: EntryBody::Batch(vec![Payload::from_vec(vec![1; 5])]) },
                ],
            },
            Message::AppendResponse { success: false, last_index: 4, full: true },
            Message::RequestVote { last_index: 3, last_term: 1 },
            Message::VoteResponse { granted: true },
            Message::Redirect { seq: 1, leader: Some(3) },
            Message::Redirect { seq: 1, leader: None },
            Message::Campaign,
            Message::GangFanIn { stamp, request: Payload::from_vec(vec![4; 8]), section: 0..8 },
        ];
        for m in msgs {
            let p = pk(m);
            let bytes = p.encode();
            assert_eq!(bytes.len(), p.wire_len());
            assert_eq!(Packet::decode(&bytes).unwrap(), p);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let b = pk(Message::Campaign).encode();
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(b[0], WIRE_VERSION);
        assert_eq!(b[1], MsgType::Campaign as u8);
        assert_eq!(u64::from_le_bytes(b[2..10].try_into().unwrap()), 9);
        assert_eq!(u16::from_le_bytes(b[10..12].try_into().unwrap()), 5);
    }
}
