//! UDP backend. Every node and client owns one socket; packets are encoded
//! with the wire format at the socket boundary.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::time::Duration;

use super::{Outbox, Transport};
use crate::payload::record_socket_bytes;
use crate::request::LogId;
use crate::wire::{Addr, NodeId, Packet, DEFAULT_MTU};

#[derive(Debug)]
pub struct UdpTransport {
    me: Addr,
    socket: UdpSocket,
    nodes: HashMap<NodeId, SocketAddr>,
    /// Client addresses learned from the packets they sent.
    clients: HashMap<u32, SocketAddr>,
    inbox: HashMap<LogId, VecDeque<Packet>>,
    buf: Vec<u8>,
    mtu: usize,
    /// Datagrams that failed to decode or were addressed elsewhere.
    pub rejected: u64,
}

impl UdpTransport {
    pub fn bind(me: Addr, local: SocketAddr, nodes: HashMap<NodeId, SocketAddr>) -> io::Result<Self> {
        let socket = UdpSocket::bind(local)?;
        socket.set_nonblocking(true)?;
        Ok(UdpTransport {
            me,
            socket,
            nodes,
            clients: HashMap::new(),
            inbox: HashMap::new(),
            buf: vec![0; DEFAULT_MTU + 64],
            mtu: DEFAULT_MTU,
            rejected: 0,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn set_node(&mut self, node: NodeId, addr: SocketAddr) {
        self.nodes.insert(node, addr);
    }

    fn resolve(&self, a: Addr) -> Option<SocketAddr> {
        match a {
            Addr::Node(n) => self.nodes.get(&n).copied(),
            Addr::Client(c) => self.clients.get(&c).copied(),
        }
    }

    /// Reads every datagram already queued by the OS into the per-log inboxes.
    fn pump(&mut self) -> io::Result<usize> {
        let mut n = 0;
        loop {
            match self.socket.recv_from(&mut self.buf) {
                Ok((len, from)) => {
                    record_socket_bytes(len);
                    match Packet::decode(&self.buf[..len]) {
                        Ok(p) if p.dst == self.me => {
                            if let Addr::Client(c) = p.src {
                                self.clients.insert(c, from);
                            }
                            self.inbox.entry(p.log).or_default().push_back(p);
                            n += 1;
                        }
                        _ => self.rejected += 1,
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(n),
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Blocks up to `timeout` for traffic, then drains the socket.
    pub fn poll(&mut self, timeout: Duration) -> io::Result<usize> {
        let got = self.pump()?;
        if got > 0 || timeout.is_zero() {
            return Ok(got);
        }
        self.socket.set_nonblocking(false)?;
        self.socket.set_read_timeout(Some(timeout))?;
        let first = self.socket.peek_from(&mut self.buf);
        self.socket.set_nonblocking(true)?;
        match first {
            Ok(_) => self.pump(),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(0),
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => Ok(0),
            Err(e) => Err(e),
        }
    }

    /// Logs with queued packets.
    pub fn ready_logs(&self) -> Vec<LogId> {
        let mut v: Vec<LogId> = self.inbox.iter().filter(|(_, q)| !q.is_empty()).map(|(l, _)| *l).collect();
        v.sort_unstable();
        v
    }
}

impl Transport for UdpTransport {
    fn mtu(&self) -> usize {
        self.mtu
    }

    fn flush(&mut self, out: &mut Outbox) {
        for p in out.drain() {
            let Some(to) = self.resolve(p.dst) else { continue };
            let bytes = p.encode();
            record_socket_bytes(bytes.len());
            // Datagram loss is tolerated by the protocol.
            let _ = self.socket.send_to(&bytes, to);
        }
    }

    fn recv_batch(&mut self, log: LogId, max: usize) -> Vec<Packet> {
        if self.pump().is_err() {
            return Vec::new();
        }
        match self.inbox.get_mut(&log) {
            Some(q) => {
                let n = q.len().min(max);
                q.drain(..n).collect()
            }
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payload::Payload;
    use crate::wire::Message;

    #[test]
    fn loopback_roundtrip_and_client_learning() {
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let mut node = UdpTransport::bind(Addr::Node(0), any, HashMap::new()).unwrap();
        let node_addr = node.local_addr().unwrap();
        let mut client = UdpTransport::bind(Addr::Client(9), any, HashMap::from([(0, node_addr)])).unwrap();

        let mut out = Outbox::default();
        let req = Payload::from_vec(vec![7; 300]);
        out.send(Packet {
            src: Addr::Client(9),
            dst: Addr::Node(0),
            log: 3,
            term: 0,
            msg: Message::ClientRequest { request: req.clone() },
        })
        .unwrap();
        client.flush(&mut out);
        node.poll(Duration::from_secs(2)).unwrap();
        let got = node.recv_batch(3, 32);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].msg, Message::ClientRequest { request: req });

        out.send(Packet { src: Addr::Node(0), dst: Addr::Client(9), log: 3, term: 1, msg: Message::Campaign }).unwrap();
        node.flush(&mut out);
        client.poll(Duration::from_secs(2)).unwrap();
        assert_eq!(client.recv_batch(3, 32).len(), 1);
    }
}
