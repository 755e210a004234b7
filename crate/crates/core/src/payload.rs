//! Reference-counted packet buffers and copy instrumentation.
//!
//! A [`Payload`] is the in-process analogue of a packet buffer: cloning it
//! bumps a reference count, it never duplicates bytes. Any code path that
//! really copies payload bytes has to go through [`Payload::deep_copy`], which
//! records the copy in a per-thread counter so tests can assert that fan-out
//! paths stay copy-free.

use std::cell::Cell;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

thread_local! {
    static PAYLOAD_COPIES: Cell<u64> = const { Cell::new(0) };
    static PAYLOAD_COPY_BYTES: Cell<u64> = const { Cell::new(0) };
    static SOCKET_COPY_BYTES: Cell<u64> = const { Cell::new(0) };
    static REBUILT_BYTES: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the copy counters for the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CopyStats {
    /// Number of in-process payload copies.
    pub payload_copies: u64,
    /// Bytes moved by those copies.
    pub payload_copy_bytes: u64,
    /// Bytes serialized to or from an OS socket (exempt from the zero-copy rule).
    pub socket_bytes: u64,
    /// Bytes re-materialized when drained entries release their NVM buffers.
    pub rebuilt_bytes: u64,
}

impl CopyStats {
    pub fn current() -> Self {
        CopyStats {
            payload_copies: PAYLOAD_COPIES.with(Cell::get),
            payload_copy_bytes: PAYLOAD_COPY_BYTES.with(Cell::get),
            socket_bytes: SOCKET_COPY_BYTES.with(Cell::get),
            rebuilt_bytes: REBUILT_BYTES.with(Cell::get),
        }
    }

    pub fn reset() {
        PAYLOAD_COPIES.with(|c| c.set(0));
        PAYLOAD_COPY_BYTES.with(|c| c.set(0));
        SOCKET_COPY_BYTES.with(|c| c.set(0));
        REBUILT_BYTES.with(|c| c.set(0));
    }

    pub fn since(self, earlier: CopyStats) -> CopyStats {
        CopyStats {
            payload_copies: self.payload_copies - earlier.payload_copies,
            payload_copy_bytes: self.payload_copy_bytes - earlier.payload_copy_bytes,
            socket_bytes: self.socket_bytes - earlier.socket_bytes,
            rebuilt_bytes: self.rebuilt_bytes - earlier.rebuilt_bytes,
        }
    }
}

pub(crate) fn record_socket_bytes(n: usize) {
    SOCKET_COPY_BYTES.with(|c| c.set(c.get() + n as u64));
}

pub(crate) fn record_rebuilt_bytes(n: usize) {
    REBUILT_BYTES.with(|c| c.set(c.get() + n as u64));
}

/// Shared, immutable packet payload.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Payload(Arc<[u8]>);

impl Payload {
    /// Wraps freshly received bytes. This is the point where a packet enters
    /// the process, so it is not counted as a copy.
    pub fn from_vec(bytes: Vec<u8>) -> Self {
        Payload(Arc::from(bytes))
    }

    pub fn empty() -> Self {
        Payload(Arc::from(Vec::new()))
    }

    /// Materializes a private copy of the bytes. Counted.
    pub fn deep_copy(&self) -> Payload {
        PAYLOAD_COPIES.with(|c| c.set(c.get() + 1));
        PAYLOAD_COPY_BYTES.with(|c| c.set(c.get() + self.0.len() as u64));
        Payload(Arc::from(self.0.to_vec()))
    }

    /// Number of live handles to this buffer.
    pub fn ref_count(&self) -> usize {
        Arc::strong_count(&self.0)
    }

    /// True when both handles reference the same buffer.
    pub fn same_buffer(&self, other: &Payload) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

impl Deref for Payload {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl AsRef<[u8]> for Payload {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl From<&[u8]> for Payload {
    fn from(bytes: &[u8]) -> Self {
        Payload(Arc::from(bytes))
    }
}

impl From<Vec<u8>> for Payload {
    fn from(bytes: Vec<u8>) -> Self {
        Payload::from_vec(bytes)
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Payload({} bytes)", self.0.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_shares_buffer_and_bumps_refcount() {
        let before = CopyStats::current();
        let p = Payload::from_vec(vec![1, 2, 3]);
        let q = p.clone();
        assert!(p.same_buffer(&q));
        assert_eq!(p.ref_count(), 2);
        drop(q);
        assert_eq!(p.ref_count(), 1);
        assert_eq!(CopyStats::current().since(before).payload_copies, 0);
    }

    #[test]
    fn deep_copy_is_counted() {
        let before = CopyStats::current();
        let p = Payload::from_vec(vec![7; 100]);
        let q = p.deep_copy();
        assert!(!p.same_buffer(&q));
        assert_eq!(&*p, &*q);
        let d = CopyStats::current().since(before);
        assert_eq!(d.payload_copies, 1);
        assert_eq!(d.payload_copy_bytes, 100);
    }
}
