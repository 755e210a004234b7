//! Flashlog layout helpers shared by the format tests.

use cyclone::flashlog::{FlashConfig, FlashLog, PAGE_SIZE, SEGMENT_SIZE};
use cyclone::medium::MemMedium;
use cyclone::nvm::{NvmConfig, NvmRegion};

/// Walks raw bytes page by page with its own header parser and returns
/// (offset, header + fragment length, continued, lsn) for every fragment.
pub fn raw_fragments(bytes: &[u8]) -> Vec<(usize, usize, bool, u64)> {
    let mut out = Vec::new();
    for (p, page) in bytes.chunks(PAGE_SIZE).enumerate() {
        let mut off = 0;
        while off + 12 <= page.len() {
            let word = u32::from_le_bytes(page[off..off + 4].try_into().unwrap());
            let size = (word & 0x7fff_ffff) as usize;
            if size == 0 {
                break;
            }
            let lsn = u64::from_le_bytes(page[off + 4..off + 12].try_into().unwrap());
            out.push((p * PAGE_SIZE + off, 12 + size, word >> 31 == 1, lsn));
            off += 12 + size;
        }
    }
    out
}

pub fn nvm() -> NvmRegion<MemMedium> {
    let cfg = NvmConfig { region_bytes: 1 << 20, ring_capacity: 128, max_entry: 16 * 1024, reserve_slots: 0 };
    NvmRegion::open_or_format(MemMedium::new(cfg.region_bytes), cfg).unwrap()
}

pub fn payload(len: usize, seed: u64) -> Vec<u8> {
    (0..len).map(|i| (i as u64).wrapping_mul(31).wrapping_add(seed) as u8 | 1).collect()
}

/// Appends `sizes` through NVM into a flashlog, completing writes only
/// after checking where they land. Returns the flash medium and the bodies.
pub fn drain_through(sizes: &[usize], flush_every: usize) -> (MemMedium, Vec<Vec<u8>>, Vec<(u64, usize)>) {
    let mut n = nvm();
    let m = MemMedium::new(0);
    let cfg = FlashConfig { prealloc_chunk: 2 * SEGMENT_SIZE as u64, auto_complete: false, ..Default::default() };
    let (mut f, _) = FlashLog::open(m.clone(), cfg).unwrap();
    let mut bodies = Vec::new();
    let mut writes = Vec::new();
    for (i, &len) in sizes.iter().enumerate() {
        let body = payload(len, i as u64);
        n.append(1, i as u64 + 1, &body).unwrap();
        bodies.push(body);
        let flush = (i + 1) % flush_every == 0 || i + 1 == sizes.len();
        if flush || n.len() > 100 {
            let upto = n.next_lsn().checked_sub(1);
            f.drain_step(&mut n, upto, true).unwrap();
            writes.extend(f.pending_writes().into_iter().map(|(o, d)| (o, d.len())));
            f.complete_all().unwrap();
            f.drain_step(&mut n, None, false).unwrap();
        }
    }
    (m, bodies, writes)
}
