//! Datagram transport: the per-call transmit queue and the two backends.
//!
//! Handlers never talk to a socket directly. They fill an [`Outbox`], which
//! the owning event loop hands to its backend right after the handler returns.
//! A multicast builds one small header per destination and chains every
//! header to the same payload handles, so fan-out never copies payload bytes.

pub mod sim;
pub mod udp;

use thiserror::Error;

use crate::request::LogId;
use crate::wire::{Addr, Message, NodeId, Packet, DEFAULT_MTU};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SendError {
    #[error("packet of {len} bytes exceeds mtu {mtu}")]
    SendTooLarge { len: usize, mtu: usize },
}

/// Packets produced by one handler invocation.
#[derive(Debug)]
pub struct Outbox {
    mtu: usize,
    packets: Vec<Packet>,
}

impl Default for Outbox {
    fn default() -> Self {
        Outbox::new(DEFAULT_MTU)
    }
}

impl Outbox {
    pub fn new(mtu: usize) -> Self {
        Outbox { mtu, packets: Vec::new() }
    }

    pub fn mtu(&self) -> usize {
        self.mtu
    }

    pub fn send(&mut self, p: Packet) -> Result<(), SendError> {
        let len = p.wire_len();
        if len > self.mtu && p.msg.msg_type() != crate::wire::MsgType::GangFanIn {
            return Err(SendError::SendTooLarge { len, mtu: self.mtu });
        }
        self.packets.push(p);
        Ok(())
    }

    /// Sends `msg` to every node in `dests`. Each destination gets its own
    /// header; payload handles are shared.
    pub fn send_multicast(
        &mut self,
        src: Addr,
        dests: &[NodeId],
        log: LogId,
        term: u64,
        msg: &Message,
    ) -> Result<(), SendError> {
        for &d in dests {
            self.send(Packet { src, dst: Addr::Node(d), log, term, msg: msg.clone() })?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn packets(&self) -> &[Packet] {
        &self.packets
    }

    pub fn drain(&mut self) -> std::vec::Drain<'_, Packet> {
        self.packets.drain(..)
    }
}

/// Common surface of the simulated and UDP backends, seen from one endpoint.
pub trait Transport {
    fn mtu(&self) -> usize;

    /// Hands every queued packet to the network.
    fn flush(&mut self, out: &mut Outbox);

    /// Returns up to `max` packets already received for `log` without
    /// waiting; possibly none.
    fn recv_batch(&mut self, log: LogId, max: usize) -> Vec<Packet>;
}

pub const RECV_BURST: usize = 32;
