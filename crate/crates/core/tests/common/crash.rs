//! Crash-point exploration for the two-level log store.
//!
//! A seeded workload appends entries and drains them while both media record
//! every barrier on a shared clock. Every recorded barrier is then replayed
//! as a crash point, and so is every 4 KB boundary inside the flashlog writes
//! of the following epoch and every write prefix of an NVM epoch. Each crash
//! image is reopened and checked.

use cyclone::entry::{EntryBody, LogEntry};
use cyclone::flashlog::{merge_recover, scan, FlashConfig, PAGE_SIZE};
use cyclone::medium::{BarrierClock, Epoch, MemMedium, WriteOp};
use cyclone::nvm::{AppendClass, NvmConfig, NvmRegion};
use cyclone::payload::Payload;
use cyclone::storage::{LogStore, StorageConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default)]
pub struct CrashSummary {
    pub points: usize,
    pub barrier_points: usize,
    pub page_points: usize,
    pub failures: Vec<String>,
}

impl CrashSummary {
    pub fn absorb(&mut self, other: CrashSummary) {
        self.points += other.points;
        self.barrier_points += other.barrier_points;
        self.page_points += other.page_points;
        self.failures.extend(other.failures);
    }
}

pub fn storage_config() -> StorageConfig {
    StorageConfig {
        nvm: NvmConfig { region_bytes: 96 * 1024, ring_capacity: 48, max_entry: 9000, reserve_slots: 2 },
        flash: FlashConfig { prealloc_chunk: 256 * 1024, ..FlashConfig::default() },
        flush_threshold: 0.5,
    }
}

struct Recorded {
    nvm: MemMedium,
    flash: MemMedium,
    appended: Vec<LogEntry>,
    /// Clock reading when each append returned.
    acked_at: Vec<u64>,
}

fn run_workload(seed: u64, appends: usize) -> Recorded {
    let cfg = storage_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nvm = MemMedium::new(cfg.nvm.region_bytes);
    let flash = MemMedium::new(0);
    let clock = BarrierClock::new();
    nvm.start_recording_with(&clock);
    flash.start_recording_with(&clock);
    let mut store = LogStore::open(nvm.clone(), flash.clone(), cfg).expect("fresh store");
    let mut appended = Vec::new();
    let mut acked_at = Vec::new();
    let mut term = 1;
    while appended.len() < appends {
        if rng.random_bool(0.05) {
            term += 1;
        }
        let index = store.last_index() + 1;
        let requests = rng.random_range(1..4);
        let body: Vec<Payload> = (0..requests)
            .map(|_| {
                // Mostly small requests with the occasional multi-page one.
                let len = if rng.random_bool(0.15) { rng.random_range(2000..2900) } else { rng.random_range(8..300) };
                let mut v = vec![0u8; len];
                rng.fill(&mut v[..]);
                Payload::from_vec(v)
            })
            .collect();
        let e = LogEntry { term, index, body: EntryBody::Batch(body) };
        let mut tries = 0;
        while store.append(e.clone(), AppendClass::Normal).is_err() {
            tries += 1;
            assert!(tries < 8, "store stays full after draining");
            store.drain(store.last_index()).expect("drain");
        }
        acked_at.push(clock.now());
        // Keep an unshared copy: held payloads would pin the NVM buffers.
        appended.push(LogEntry::decode_body(e.term, e.index, &e.encode_body()).unwrap());
        if rng.random_bool(0.3) {
            store.drain(store.last_index()).expect("drain");
        }
    }
    drop(store);
    Recorded { nvm, flash, appended, acked_at }
}

/// Partial versions of an epoch: every proper prefix of its writes and, when
/// `pages` is set, each write cut at every 4 KB boundary it crosses.
fn torn_variants(epoch: &Epoch, pages: bool) -> Vec<(Vec<WriteOp>, bool)> {
    let mut out = Vec::new();
    for j in 0..epoch.writes.len() {
        if j > 0 {
            out.push((epoch.writes[..j].to_vec(), false));
        }
        if pages {
            let w = &epoch.writes[j];
            let end = w.offset + w.data.len() as u64;
            let mut b = (w.offset / PAGE_SIZE as u64 + 1) * PAGE_SIZE as u64;
            while b < end {
                let mut v = epoch.writes[..j].to_vec();
                v.push(WriteOp { offset: w.offset, data: w.data[..(b - w.offset) as usize].to_vec() });
                out.push((v, true));
                b += PAGE_SIZE as u64;
            }
        }
    }
    out
}

fn check_point(rec: &Recorded, nvm_img: Vec<u8>, flash_img: Vec<u8>, clock: u64, label: &str) -> Option<String> {
    let cfg = storage_config();
    // Exactly-once merge, checked on the raw levels.
    let flash_scan = match scan(&MemMedium::from_image(flash_img.clone())) {
        Ok(s) => s,
        Err(e) => return Some(format!("{label}: flashlog scan failed: {e}")),
    };
    let nvm_entries = match NvmRegion::open_or_format(MemMedium::from_image(nvm_img.clone()), cfg.nvm) {
        Ok(r) => r.entries().expect("reading nvm entries"),
        Err(e) => return Some(format!("{label}: nvm open failed: {e}")),
    };
    let merged = match merge_recover(&flash_scan.records, &nvm_entries) {
        Ok(m) => m,
        Err(e) => return Some(format!("{label}: merge failed: {e}")),
    };
    for (i, r) in merged.iter().enumerate() {
        if r.lsn != i as u64 {
            return Some(format!("{label}: merged position {i} holds lsn {}", r.lsn));
        }
    }
    // Consistent prefix through the full open path.
    let store = match LogStore::open(MemMedium::from_image(nvm_img), MemMedium::from_image(flash_img), cfg) {
        Ok(s) => s,
        Err(e) => return Some(format!("{label}: open failed: {e}")),
    };
    let got = store.entries();
    if got.len() > rec.appended.len() || got != &rec.appended[..got.len()] {
        return Some(format!("{label}: recovered {} entries that are not a prefix of the appended log", got.len()));
    }
    let must = rec.acked_at.iter().filter(|&&a| a <= clock).count();
    if got.len() < must {
        return Some(format!("{label}: lost acknowledged entries ({} recovered, {must} acknowledged)", got.len()));
    }
    if merged.len() != got.len() {
        return Some(format!("{label}: merge holds {} records, store {}", merged.len(), got.len()));
    }
    None
}

/// Runs one workload and checks every crash point it produced.
pub fn explore(seed: u64, appends: usize) -> CrashSummary {
    let rec = run_workload(seed, appends);
    let nvm_epochs = rec.nvm.epochs();
    let flash_epochs = rec.flash.epochs();
    let last = nvm_epochs.iter().chain(&flash_epochs).map(|e| e.stamp).max().unwrap_or(0);
    let mut summary = CrashSummary::default();
    let done = |epochs: &[Epoch], clock: u64| epochs.iter().take_while(|e| e.stamp <= clock).count();
    for clock in 0..=last {
        let (n_done, f_done) = (done(&nvm_epochs, clock), done(&flash_epochs, clock));
        summary.points += 1;
        summary.barrier_points += 1;
        let label = format!("seed {seed} barrier {clock}");
        if let Some(f) =
            check_point(&rec, rec.nvm.image_at(n_done, &[]), rec.flash.image_at(f_done, &[]), clock, &label)
        {
            summary.failures.push(f);
        }
        // Torn versions of whichever epoch closes next.
        let next_nvm = nvm_epochs.get(n_done).filter(|e| e.stamp == clock + 1);
        let next_flash = flash_epochs.get(f_done).filter(|e| e.stamp == clock + 1);
        if let Some(e) = next_nvm {
            for (k, (partial, _)) in torn_variants(e, false).into_iter().enumerate() {
                summary.points += 1;
                let label = format!("seed {seed} barrier {clock} nvm prefix {k}");
                let img = rec.nvm.image_at(n_done, &partial);
                if let Some(f) = check_point(&rec, img, rec.flash.image_at(f_done, &[]), clock, &label) {
                    summary.failures.push(f);
                }
            }
        }
        if let Some(e) = next_flash {
            for (k, (partial, page)) in torn_variants(e, true).into_iter().enumerate() {
                summary.points += 1;
                if page {
                    summary.page_points += 1;
                }
                let label = format!("seed {seed} barrier {clock} flash cut {k}");
                let img = rec.flash.image_at(f_done, &partial);
                if let Some(f) = check_point(&rec, rec.nvm.image_at(n_done, &[]), img, clock, &label) {
                    summary.failures.push(f);
                }
            }
        }
    }
    summary
}
