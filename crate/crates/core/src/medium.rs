//! Byte-addressable backing stores with an explicit persistence barrier.
//!
//! Writes become durable only at [`Medium::persist`]. The file backend maps
//! that onto `sync_data`; the in-memory backend keeps separate volatile and
//! durable images and can record every barrier epoch so tests can rebuild the
//! durable image as it would look after a crash at any point.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

/// A persistent byte region.
pub trait Medium: Send {
    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()>;

    fn write_at(&mut self, offset: u64, data: &[u8]) -> io::Result<()>;

    /// Ordering barrier: every write issued before this call is durable when
    /// it returns. The range is advisory.
    fn persist(&mut self, offset: u64, len: u64) -> io::Result<()>;

    /// Grows the region with zero bytes. The new length is durable on return.
    fn extend_zeroed(&mut self, new_len: u64) -> io::Result<()>;
}

/// File-backed medium.
#[derive(Debug)]
pub struct FileMedium {
    file: File,
    len: u64,
}

impl FileMedium {
    /// Opens `path`, creating it with `len` zero bytes if absent. Returns the
    /// medium and whether it was freshly created.
    pub fn open_or_create(path: &Path, len: u64) -> io::Result<(Self, bool)> {
        let exists = path.exists();
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        if !exists {
            file.set_len(len)?;
            file.sync_all()?;
        }
        let len = file.metadata()?.len();
        Ok((FileMedium { file, len }, !exists))
    }

    pub fn open_existing(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        Ok(FileMedium { file, len })
    }
}

impl Medium for FileMedium {
    fn len(&self) -> u64 {
        self.len
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        self.file.read_exact_at(buf, offset)
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> io::Result<()> {
        if offset + data.len() as u64 > self.len {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "write beyond end of medium"));
        }
        self.file.write_all_at(data, offset)
    }

    fn persist(&mut self, _offset: u64, _len: u64) -> io::Result<()> {
        self.file.sync_data()
    }

    fn extend_zeroed(&mut self, new_len: u64) -> io::Result<()> {
        if new_len <= self.len {
            return Ok(());
        }
        // Explicit zero fill so the tail is materialized before use.
        let chunk = vec![0u8; 1 << 20];
        let mut at = self.len;
        while at < new_len {
            let n = ((new_len - at) as usize).min(chunk.len());
            self.file.write_all_at(&chunk[..n], at)?;
            at += n as u64;
        }
        self.file.sync_all()?;
        self.len = new_len;
        Ok(())
    }
}

/// One write as issued between two barriers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteOp {
    pub offset: u64,
    pub data: Vec<u8>,
}

/// Writes issued between consecutive barriers. `extend_to` is set for a
/// zero-extension, which is applied before the writes of the same epoch.
#[derive(Debug, Clone, Default)]
pub struct Epoch {
    pub extend_to: Option<u64>,
    pub writes: Vec<WriteOp>,
    /// Position of the closing barrier on the recording's clock.
    pub stamp: u64,
}

/// Orders barriers across several media. Media recording with the same
/// clock stamp their epochs from one sequence.
#[derive(Debug, Clone, Default)]
pub struct BarrierClock(Arc<AtomicU64>);

impl BarrierClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of barriers stamped so far.
    pub fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    fn tick(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst) + 1
    }
}

#[derive(Debug, Default)]
struct MemState {
    volatile: Vec<u8>,
    durable: Vec<u8>,
    pending: Vec<WriteOp>,
    barriers: u64,
    recording: Option<Recording>,
}

#[derive(Debug, Clone, Default)]
struct Recording {
    base: Vec<u8>,
    epochs: Vec<Epoch>,
    clock: BarrierClock,
}

/// In-memory medium with separate volatile and durable images.
///
/// Handles are cheap clones of one shared region, so a harness can keep a
/// handle across a simulated process crash and reopen the durable image.
#[derive(Debug, Clone, Default)]
pub struct MemMedium {
    inner: Arc<Mutex<MemState>>,
}

impl MemMedium {
    pub fn new(len: u64) -> Self {
        Self::from_image(vec![0; len as usize])
    }

    pub fn from_image(image: Vec<u8>) -> Self {
        MemMedium {
            inner: Arc::new(Mutex::new(MemState { volatile: image.clone(), durable: image, ..Default::default() })),
        }
    }

    fn state(&self) -> MutexGuard<'_, MemState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Starts recording barrier epochs from the current durable image.
    pub fn start_recording(&self) {
        self.start_recording_with(&BarrierClock::new());
    }

    /// Like [`start_recording`](Self::start_recording), stamping epochs from
    /// a shared clock.
    pub fn start_recording_with(&self, clock: &BarrierClock) {
        let mut st = self.state();
        let base = st.durable.clone();
        st.recording = Some(Recording { base, epochs: Vec::new(), clock: clock.clone() });
    }

    /// Number of barriers completed so far.
    pub fn barrier_count(&self) -> u64 {
        self.state().barriers
    }

    /// Recorded epochs (empty when not recording).
    pub fn epochs(&self) -> Vec<Epoch> {
        self.state().recording.as_ref().map(|r| r.epochs.clone()).unwrap_or_default()
    }

    /// Durable image after `completed` recorded epochs, plus `partial` writes
    /// of the following epoch already torn by the caller.
    pub fn image_at(&self, completed: usize, partial: &[WriteOp]) -> Vec<u8> {
        let st = self.state();
        let rec = st.recording.as_ref().expect("recording not started");
        let mut img = rec.base.clone();
        for epoch in &rec.epochs[..completed] {
            apply_epoch(&mut img, epoch);
        }
        if let Some(next) = rec.epochs.get(completed) {
            if let Some(len) = next.extend_to {
                if img.len() < len as usize {
                    img.resize(len as usize, 0);
                }
            }
        }
        for w in partial {
            apply_write(&mut img, w);
        }
        img
    }

    /// Current durable image.
    pub fn durable_image(&self) -> Vec<u8> {
        self.state().durable.clone()
    }

    /// Simulates power loss: every write not covered by a barrier is lost.
    pub fn crash(&self) {
        let mut st = self.state();
        st.pending.clear();
        st.volatile = st.durable.clone();
    }

    /// Writes not yet covered by a barrier.
    pub fn pending_writes(&self) -> Vec<WriteOp> {
        self.state().pending.clone()
    }
}

fn apply_write(img: &mut [u8], w: &WriteOp) {
    let start = w.offset as usize;
    let end = (start + w.data.len()).min(img.len());
    if start < end {
        img[start..end].copy_from_slice(&w.data[..end - start]);
    }
}

fn apply_epoch(img: &mut Vec<u8>, epoch: &Epoch) {
    if let Some(len) = epoch.extend_to {
        if img.len() < len as usize {
            img.resize(len as usize, 0);
        }
    }
    for w in &epoch.writes {
        apply_write(img, w);
    }
}

impl Medium for MemMedium {
    fn len(&self) -> u64 {
        self.state().volatile.len() as u64
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        let st = self.state();
        let start = offset as usize;
        let end = start + buf.len();
        if end > st.volatile.len() {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "read past end"));
        }
        buf.copy_from_slice(&st.volatile[start..end]);
        Ok(())
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> io::Result<()> {
        let mut st = self.state();
        let start = offset as usize;
        let end = start + data.len();
        if end > st.volatile.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "write beyond end of medium"));
        }
        st.volatile[start..end].copy_from_slice(data);
        st.pending.push(WriteOp { offset, data: data.to_vec() });
        Ok(())
    }

    fn persist(&mut self, _offset: u64, _len: u64) -> io::Result<()> {
        let mut st = self.state();
        let pending = std::mem::take(&mut st.pending);
        for w in &pending {
            apply_write(&mut st.durable, w);
        }
        st.barriers += 1;
        if let Some(rec) = st.recording.as_mut() {
            let stamp = rec.clock.tick();
            rec.epochs.push(Epoch { extend_to: None, writes: pending, stamp });
        }
        Ok(())
    }

    fn extend_zeroed(&mut self, new_len: u64) -> io::Result<()> {
        let mut st = self.state();
        if new_len as usize <= st.volatile.len() {
            return Ok(());
        }
        // Extension is itself a barrier: earlier writes become durable first.
        let pending = std::mem::take(&mut st.pending);
        for w in &pending {
            apply_write(&mut st.durable, w);
        }
        st.volatile.resize(new_len as usize, 0);
        st.durable.resize(new_len as usize, 0);
        st.barriers += 1;
        if let Some(rec) = st.recording.as_mut() {
            if !pending.is_empty() {
                let stamp = rec.clock.tick();
                rec.epochs.push(Epoch { extend_to: None, writes: pending, stamp });
            }
            let stamp = rec.clock.tick();
            rec.epochs.push(Epoch { extend_to: Some(new_len), writes: Vec::new(), stamp });
        }
        Ok(())
    }
}

impl Medium for Box<dyn Medium> {
    fn len(&self) -> u64 {
        (**self).len()
    }
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        (**self).read_at(offset, buf)
    }
    fn write_at(&mut self, offset: u64, data: &[u8]) -> io::Result<()> {
        (**self).write_at(offset, data)
    }
    fn persist(&mut self, offset: u64, len: u64) -> io::Result<()> {
        (**self).persist(offset, len)
    }
    fn extend_zeroed(&mut self, new_len: u64) -> io::Result<()> {
        (**self).extend_zeroed(new_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unpersisted_writes_are_lost_on_crash() {
        let mut m = MemMedium::new(64);
        m.write_at(0, &[1, 2, 3]).unwrap();
        m.persist(0, 3).unwrap();
        m.write_at(8, &[9]).unwrap();
        m.crash();
        let mut buf = [0u8; 9];
        m.read_at(0, &mut buf).unwrap();
        assert_eq!(buf, [1, 2, 3, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn recorded_epochs_rebuild_images() {
        let mut m = MemMedium::new(16);
        m.start_recording();
        m.write_at(0, &[1]).unwrap();
        m.persist(0, 1).unwrap();
        m.write_at(1, &[2]).unwrap();
        m.write_at(2, &[3]).unwrap();
        m.persist(0, 3).unwrap();
        assert_eq!(m.epochs().len(), 2);
        assert_eq!(&m.image_at(0, &[])[..3], &[0, 0, 0]);
        assert_eq!(&m.image_at(1, &[])[..3], &[1, 0, 0]);
        let torn = vec![m.epochs()[1].writes[0].clone()];
        assert_eq!(&m.image_at(1, &torn)[..3], &[1, 2, 0]);
        assert_eq!(&m.image_at(2, &[])[..3], &[1, 2, 3]);
    }

    #[test]
    fn file_medium_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let (mut f, created) = FileMedium::open_or_create(&path, 4096).unwrap();
        assert!(created);
        f.write_at(100, b"hello").unwrap();
        f.persist(100, 5).unwrap();
        f.extend_zeroed(8192).unwrap();
        drop(f);
        let (f, created) = FileMedium::open_or_create(&path, 4096).unwrap();
        assert!(!created);
        assert_eq!(f.len(), 8192);
        let mut buf = [0u8; 5];
        f.read_at(100, &mut buf).unwrap();
        assert_eq!(&buf, b"hello");
    }
}
