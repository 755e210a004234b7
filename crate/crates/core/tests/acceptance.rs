//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails at
//! the end if any criterion failed.
//!
//! Run with `cargo test --release -p cyclone --test acceptance -- --nocapture`.

mod common;

use std::time::{Duration, Instant};

use common::crash::{explore, CrashSummary};
use common::flash::{drain_through, payload, raw_fragments};
use common::traces::{gang_trace, history_trace, safety_trace, TraceOutcome};
use cyclone::bench::{peak_throughput, run_failover, run_sim, FailoverParams, Preset, SimParams};
use cyclone::flashlog::{fsck, scan, LogRecord, SegmentBuffer, PAGE_SIZE, SEGMENT_SIZE};
use cyclone::medium::Medium;
use cyclone::payload::CopyStats;
use cyclone::raft::MILLIS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SAFETY_TRACES: u64 = 10_000;
const HISTORY_TRACES: u64 = 100;
const GANG_TRACES: u64 = 1_000;
const FAILOVER_SEEDS: u64 = 50;
const AB_LIMIT: Duration = Duration::from_secs(120);

#[derive(Default)]
struct Suite {
    failed: Vec<String>,
    /// Payload copies seen on every simulated run.
    copies: u64,
    sim_runs: usize,
    /// (runs checked, runs whose replicas diverged)
    convergence: (usize, Vec<String>),
}

impl Suite {
    fn line(&mut self, name: &str, pass: bool, detail: String, took: Duration) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {detail} ({:.1}s)", took.as_secs_f64());
        if !pass {
            self.failed.push(format!("{name}: {detail}"));
        }
    }

    fn trace(&mut self, kind: &str, t: &TraceOutcome) {
        self.copies += t.payload_copies;
        self.sim_runs += 1;
        self.convergence.0 += 1;
        if !t.converged {
            self.convergence.1.push(format!("{kind} seed {}", t.seed));
        }
    }
}

fn raft_safety(s: &mut Suite) {
    let t0 = Instant::now();
    let mut bad = Vec::new();
    let (mut three, mut five, mut elections) = (0, 0, 0);
    for seed in 0..SAFETY_TRACES {
        let replicas = if seed % 2 == 0 { 3 } else { 5 };
        let t = safety_trace(seed, replicas);
        if replicas == 3 {
            three += 1
        } else {
            five += 1
        }
        elections += t.elections;
        if !t.safety.is_empty() {
            bad.push(format!("seed {seed}: {}", t.safety[0]));
        }
        s.trace("safety", &t);
    }
    let took = t0.elapsed();
    let pass = bad.is_empty() && took < Duration::from_secs(600);
    let detail = format!(
        "{SAFETY_TRACES} traces ({three} with 3 replicas, {five} with 5), {elections} elections, {} violating traces{}",
        bad.len(),
        bad.first().map(|b| format!(", first: {b}")).unwrap_or_default()
    );
    s.line("raft safety", pass, detail, took);
}

fn linearizability(s: &mut Suite) {
    let t0 = Instant::now();
    let (mut ops, mut bad_keys, mut weak, mut journals) = (0, Vec::new(), Vec::new(), Vec::new());
    for seed in 0..HISTORY_TRACES {
        let h = history_trace(seed, 200, 20);
        ops += h.operations;
        bad_keys.extend(h.bad_keys.iter().map(|k| format!("seed {seed} key {}", String::from_utf8_lossy(k))));
        weak.extend(h.weak_problems.iter().map(|p| format!("seed {seed}: {p}")));
        journals.extend(h.journal_problems.iter().map(|p| format!("seed {seed}: {p}")));
        if !h.trace.safety.is_empty() {
            journals.push(format!("seed {seed}: {}", h.trace.safety[0]));
        }
        s.trace("history", &h.trace);
    }
    let pass = bad_keys.is_empty() && weak.is_empty() && journals.is_empty();
    let detail = format!(
        "{HISTORY_TRACES} traces, 3 clients, {ops} operations; {} non-linearizable keys, {} weak-read violations, {} other{}",
        bad_keys.len(),
        weak.len(),
        journals.len(),
        bad_keys.iter().chain(&weak).chain(&journals).next().map(|b| format!(", first: {b}")).unwrap_or_default()
    );
    s.line("per-key linearizability", pass, detail, t0.elapsed());
}

fn crash_recovery(s: &mut Suite) {
    let t0 = Instant::now();
    let mut total = CrashSummary::default();
    for seed in 1..=3 {
        total.absorb(explore(seed, 150));
    }
    let pass = total.failures.is_empty() && total.points >= 1000 && total.page_points > 0;
    let detail = format!(
        "{} crash points ({} barriers, {} 4 KB cuts, rest torn NVM epochs), {} failures{}",
        total.points,
        total.barrier_points,
        total.page_points,
        total.failures.len(),
        total.failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
    );
    s.line("crash recovery", pass, detail, t0.elapsed());
}

fn ganged(s: &mut Suite) {
    let t0 = Instant::now();
    let (mut gangs, mut failed, mut problems) = (0, 0, Vec::new());
    for seed in 0..GANG_TRACES {
        let logs = 2 + (seed as usize % 7);
        let g = gang_trace(seed, logs);
        gangs += g.gangs;
        failed += g.failed;
        problems.extend(g.problems.iter().map(|p| format!("seed {seed}: {p}")));
        problems.extend(g.trace.safety.iter().map(|p| format!("seed {seed}: {p}")));
        s.trace("gang", &g.trace);
    }
    let pass = problems.is_empty() && failed > 0;
    let detail = format!(
        "{GANG_TRACES} traces with 2-8 logs, {gangs} gangs, {failed} aborted and retried, {} problems{}",
        problems.len(),
        problems.first().map(|p| format!(", first: {p}")).unwrap_or_default()
    );
    s.line("ganged atomicity", pass, detail, t0.elapsed());
}

fn flashlog_format(s: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut problems = Vec::new();
    let (mut fragments, mut files) = (0, 0);
    for case in 0..300 {
        // Segment buffer layout.
        let mut seg = SegmentBuffer::default();
        if seg.len() != 128 * 1024 {
            problems.push(format!("segment buffer holds {} bytes", seg.len()));
        }
        let mut lsn = 0;
        while seg.place(lsn, &payload(rng.random_range(1..20_000), lsn)).is_ok() {
            lsn += 1;
        }
        for (off, len, _, _) in raw_fragments(seg.bytes()) {
            fragments += 1;
            if off / PAGE_SIZE != (off + len - 1) / PAGE_SIZE {
                problems.push(format!("case {case}: fragment at {off} crosses a page"));
            }
        }
        // Files produced by the drain path.
        let sizes: Vec<usize> = (0..rng.random_range(1..120)).map(|_| rng.random_range(1..12_000)).collect();
        let (m, bodies, writes) = drain_through(&sizes, rng.random_range(1..20));
        files += 1;
        if m.len() % SEGMENT_SIZE as u64 != 0 {
            problems.push(format!("case {case}: file length {}", m.len()));
        }
        for (off, len) in writes {
            if off / SEGMENT_SIZE as u64 != (off + len as u64 - 1) / SEGMENT_SIZE as u64 {
                problems.push(format!("case {case}: write at {off} spans segments"));
            }
        }
        for (off, len, _, _) in raw_fragments(&m.durable_image()) {
            fragments += 1;
            if off / PAGE_SIZE != (off + len - 1) / PAGE_SIZE {
                problems.push(format!("case {case}: file fragment at {off} crosses a page"));
            }
        }
        let report = fsck(&m).expect("fsck");
        if !report.is_clean() || report.tail.is_some() || report.records != bodies.len() as u64 {
            problems.push(format!("case {case}: fsck {:?} tail {:?}", report.errors, report.tail));
        }
        let got: Vec<Vec<u8>> =
            scan(&m).unwrap().records.iter().map(|r| LogRecord::from_flash(r).unwrap().body).collect();
        if got != bodies {
            problems.push(format!("case {case}: records do not round-trip"));
        }
    }
    let detail = format!(
        "300 segment layouts and {files} drained files, {fragments} fragments checked, fsck clean on all files; {} problems{}",
        problems.len(),
        problems.first().map(|p| format!(", first: {p}")).unwrap_or_default()
    );
    s.line("flashlog format", problems.is_empty(), detail, t0.elapsed());
}

/// Runs `f` and charges its payload copies to the suite.
fn counted<T>(s: &mut Suite, f: impl FnOnce() -> T) -> T {
    let before = CopyStats::current();
    let out = f();
    s.copies += CopyStats::current().since(before).payload_copies;
    s.sim_runs += 1;
    out
}

fn performance(s: &mut Suite) {
    let spec = Preset::Update100.spec();
    let base = SimParams { seed: 11, ..SimParams::default() };

    let t0 = Instant::now();
    let high = cyclone::bench::WorkloadSpec { clients: 256, ..spec.clone() };
    let on = counted(s, || run_sim(&high, &SimParams { batching: true, ..base }));
    let off = counted(s, || run_sim(&high, &SimParams { batching: false, ..base }));
    let ratio = on.throughput_ops_per_sec / off.throughput_ops_per_sec.max(1.0);
    let took = t0.elapsed();
    s.line(
        "perf (i) batching",
        ratio >= 2.0 && took <= AB_LIMIT,
        format!(
            "8 logs, 256 clients: on {:.0} ops/s, off {:.0} ops/s, ratio {ratio:.2} (need >= 2)",
            on.throughput_ops_per_sec, off.throughput_ops_per_sec
        ),
        took,
    );

    let t0 = Instant::now();
    let loads = [256, 1024];
    let one = counted(s, || peak_throughput(&spec, &SimParams { logs: 1, ..base }, &loads));
    let eight = counted(s, || peak_throughput(&spec, &SimParams { logs: 8, ..base }, &loads));
    let ratio = eight / one.max(1.0);
    let took = t0.elapsed();
    s.line(
        "perf (ii) physical logs",
        ratio >= 3.0 && took <= AB_LIMIT,
        format!(
            "peak over {loads:?} clients: 8 logs {eight:.0} ops/s, 1 log {one:.0} ops/s, ratio {ratio:.2} (need >= 3)"
        ),
        took,
    );

    let t0 = Instant::now();
    let loads = [64, 256];
    let peaks: Vec<f64> = (1..=5)
        .map(|r| counted(s, || peak_throughput(&spec, &SimParams { replicas: r, logs: 1, ..base }, &loads)))
        .collect();
    let monotone = peaks.windows(2).all(|w| w[1] <= w[0]);
    let took = t0.elapsed();
    let shown: Vec<String> = peaks.iter().map(|p| format!("{p:.0}")).collect();
    s.line(
        "perf (iii) replica count",
        monotone && took <= AB_LIMIT,
        format!("1 log, peak ops/s for 1..5 replicas: {} (need non-increasing)", shown.join(", ")),
        took,
    );
}

fn failover(s: &mut Suite) {
    let t0 = Instant::now();
    let mut gaps: Vec<f64> = Vec::new();
    for seed in 0..FAILOVER_SEEDS {
        let p = FailoverParams {
            sim: SimParams { seed, ..FailoverParams::default().sim },
            restart_after: Some(200 * MILLIS),
            run_for: 900 * MILLIS,
            ..FailoverParams::default()
        };
        let r = counted(s, || run_failover(&p));
        gaps.push(r.gap_ms);
        s.convergence.0 += 1;
        if r.converged != Some(true) {
            s.convergence.1.push(format!("failover seed {seed}"));
        }
    }
    gaps.sort_by(f64::total_cmp);
    let pct = |q: f64| gaps[((gaps.len() as f64 * q).ceil() as usize).clamp(1, gaps.len()) - 1];
    let (p50, p95) = (pct(0.5), pct(0.95));
    let detail = format!(
        "{FAILOVER_SEEDS} leader kills, 30 ms client timeout: gap min {:.1} ms, median {p50:.1} ms, p95 {p95:.1} ms, max {:.1} ms (need p95 < 120)",
        gaps[0],
        gaps[gaps.len() - 1]
    );
    s.line("failover", p95 < 120.0, detail, t0.elapsed());
}

#[test]
fn acceptance_criteria() {
    let t0 = Instant::now();
    let mut s = Suite::default();
    raft_safety(&mut s);
    linearizability(&mut s);
    crash_recovery(&mut s);
    ganged(&mut s);
    flashlog_format(&mut s);
    performance(&mut s);
    failover(&mut s);

    let runs = s.sim_runs;
    let copies = s.copies;
    s.line(
        "zero-copy",
        copies == 0,
        format!("{runs} simulated runs, {copies} payload copies on fan-out and fan-in"),
        Duration::ZERO,
    );
    let (checked, diverged) = std::mem::take(&mut s.convergence);
    s.line(
        "replica convergence",
        diverged.is_empty(),
        format!(
            "{checked} quiesced runs with every replica restarted, {} diverged{}",
            diverged.len(),
            diverged.first().map(|d| format!(", first: {d}")).unwrap_or_default()
        ),
        Duration::ZERO,
    );
    println!("acceptance suite finished in {:.0}s", t0.elapsed().as_secs_f64());
    assert!(s.failed.is_empty(), "failed criteria:\n{}", s.failed.join("\n"));
}
