//! Workload presets, simulated benchmark runs and the failover experiment.
//!
//! All presets are synthetic: they reproduce only the read/write mix and the
//! value-size skew of the workloads they are named after.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, ClusterConfig, CostModel, Workload};
use crate::raft::{Nanos, RaftConfig, MILLIS};
use crate::request::{ClientId, LogId, Op};
use crate::transport::sim::NetConfig;

/// Distribution of value sizes in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueSize {
    Fixed {
        bytes: usize,
    },
    /// Uniform in `small` with probability `p_small`, otherwise uniform in `large`.
    Bimodal {
        small: (usize, usize),
        large: (usize, usize),
        p_small: f64,
    },
}

impl ValueSize {
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            ValueSize::Fixed { bytes } => bytes,
            ValueSize::Bimodal { small, large, p_small } => {
                let (lo, hi) = if rng.random_bool(p_small) { small } else { large };
                rng.random_range(lo..=hi)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub name: String,
    pub update_pct: u32,
    /// Reads ordered through the log.
    pub read_pct: u32,
    /// Single round-trip reads.
    pub weak_read_pct: u32,
    pub keys: u64,
    pub key_bytes: usize,
    pub value: ValueSize,
    pub clients: usize,
    pub duration: Nanos,
    /// Completions before this point are excluded from the measurement.
    pub warmup: Nanos,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Preset::Update100.spec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Update100,
    /// `update100` with 256-byte values.
    Update100Large,
    Readheavy95,
    Writeheavy80,
    /// Mixed value sizes, most of the bytes in items under 500 bytes.
    Smallvalues,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::Update100, Preset::Update100Large, Preset::Readheavy95, Preset::Writeheavy80, Preset::Smallvalues];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Update100 => "update100",
            Preset::Update100Large => "update100large",
            Preset::Readheavy95 => "readheavy95",
            Preset::Writeheavy80 => "writeheavy80",
            Preset::Smallvalues => "smallvalues",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn spec(self) -> WorkloadSpec {
        let base = WorkloadSpec {
            name: self.name().into(),
            update_pct: 100,
            read_pct: 0,
            weak_read_pct: 0,
            keys: 1_000_000,
            key_bytes: 8,
            value: ValueSize::Fixed { bytes: 8 },
            clients: 64,
            duration: 200 * MILLIS,
            warmup: 50 * MILLIS,
        };
        match self {
            Preset::Update100 => base,
            Preset::Update100Large => WorkloadSpec { value: ValueSize::Fixed { bytes: 256 }, ..base },
            Preset::Readheavy95 => WorkloadSpec { update_pct: 5, weak_read_pct: 95, ..base },
            Preset::Writeheavy80 => WorkloadSpec { update_pct: 80, weak_read_pct: 20, ..base },
            Preset::Smallvalues => WorkloadSpec {
                update_pct: 100,
                value: ValueSize::Bimodal { small: (16, 480), large: (500, 2000), p_small: 0.985 },
                ..base
            },
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.update_pct + self.read_pct + self.weak_read_pct != 100 {
            return Err(format!("mix must sum to 100, got {}", self.update_pct + self.read_pct + self.weak_read_pct));
        }
        if self.keys == 0 || self.key_bytes == 0 || self.key_bytes > crate::request::MAX_KEY {
            return Err("bad key space".into());
        }
        Ok(())
    }

    fn key(&self, rng: &mut impl Rng) -> Vec<u8> {
        let k = rng.random_range(0..self.keys);
        let mut key = vec![0u8; self.key_bytes];
        let b = k.to_le_bytes();
        let n = self.key_bytes.min(8);
        key[..n].copy_from_slice(&b[..n]);
        key
    }

    /// Draws one operation.
    pub fn op(&self, rng: &mut ChaCha8Rng) -> Op {
        let roll = rng.random_range(0..100);
        let key = self.key(rng);
        if roll < self.update_pct {
            let mut value = vec![0u8; self.value.sample(rng)];
            rng.fill_bytes(&mut value);
            Op::Put { key, value }
        } else if roll < self.update_pct + self.read_pct {
            Op::Get { key }
        } else {
            Op::WeakGet { key }
        }
    }

    /// Unbounded closed-loop workload.
    pub fn generator(&self) -> Box<dyn Workload> {
        let spec = self.clone();
        Box::new(move |_c: ClientId, _now: Nanos, rng: &mut ChaCha8Rng| Some(spec.op(rng)))
    }
}

/// Deployment parameters of a simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub replicas: usize,
    pub logs: usize,
    pub seed: u64,
    pub batching: bool,
    pub raft: RaftConfig,
    pub net: NetConfig,
    pub cost: CostModel,
    pub nvm_region_bytes: u64,
    pub nvm_ring: u32,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            replicas: 3,
            logs: 8,
            seed: 1,
            batching: true,
            raft: RaftConfig::default(),
            net: NetConfig::default(),
            cost: CostModel::default(),
            nvm_region_bytes: 4 << 20,
            nvm_ring: 4096,
        }
    }
}

impl SimParams {
    pub fn cluster_config(&self, clients: usize) -> ClusterConfig {
        let mut cfg = ClusterConfig::new(self.replicas, self.logs, self.seed);
        cfg.server.raft = RaftConfig { batching: self.batching, ..self.raft };
        cfg.net = self.net;
        cfg.cost = self.cost;
        cfg.clients = clients;
        cfg.storage = crate::storage::StorageConfig::compact(self.nvm_region_bytes, self.nvm_ring);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalReport {
    pub start_ms: f64,
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub preset: String,
    pub transport: String,
    pub replicas: usize,
    pub logs: usize,
    pub clients: usize,
    pub seed: u64,
    pub batching: bool,
    pub measured_ms: f64,
    pub completed: u64,
    pub throughput_ops_per_sec: f64,
    pub latency_mean_us: f64,
    pub latency_p50_us: f64,
    pub latency_p99_us: f64,
    pub statuses: BTreeMap<String, u64>,
    pub packets_sent: u64,
    pub packets_dropped: u64,
    /// Busy fraction of the busiest log instance.
    pub peak_instance_utilization: f64,
    pub timeline: Vec<IntervalReport>,
}

impl BenchReport {
    pub fn csv_header() -> &'static str {
        "preset,transport,replicas,logs,clients,seed,batching,completed,throughput_ops_per_sec,latency_mean_us,latency_p50_us,latency_p99_us"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.1},{:.2},{:.2},{:.2}",
            self.preset,
            self.transport,
            self.replicas,
            self.logs,
            self.clients,
            self.seed,
            self.batching,
            self.completed,
            self.throughput_ops_per_sec,
            self.latency_mean_us,
            self.latency_p50_us,
            self.latency_p99_us
        )
    }
}

fn percentile(sorted: &[Nanos], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[i] as f64
}

/// Summary statistics over `(completed_at, latency)` samples in `[from, to)`.
pub(crate) fn summarize(samples: &[(Nanos, Nanos)], from: Nanos, to: Nanos) -> (u64, f64, f64, f64, f64) {
    let mut lat: Vec<Nanos> = samples.iter().filter(|(t, _)| *t >= from && *t < to).map(|(_, l)| *l).collect();
    lat.sort_unstable();
    let n = lat.len() as u64;
    let secs = (to - from) as f64 / 1e9;
    let mean = if n == 0 { 0.0 } else { lat.iter().sum::<u64>() as f64 / n as f64 };
    (n, n as f64 / secs, mean / 1e3, percentile(&lat, 0.5) / 1e3, percentile(&lat, 0.99) / 1e3)
}

/// Runs `spec` against a simulated deployment. Deterministic for a seed.
pub fn run_sim(spec: &WorkloadSpec, params: &SimParams) -> BenchReport {
    let cfg = params.cluster_config(spec.clients);
    let mut cluster = Cluster::new(cfg, spec.generator());
    // Measurement starts once every log has elected a leader.
    let give_up = 10 * params.raft.election_max + spec.warmup;
    while cluster.now() < give_up && (0..params.logs as LogId).any(|l| cluster.leader_of(l).is_none()) {
        let t = cluster.now() + MILLIS;
        cluster.run_until(t);
    }
    let start = cluster.now() + spec.warmup;
    let end = start + spec.duration;
    cluster.run_until(start);
    let cpu_at_start: Vec<Vec<Nanos>> = (0..params.replicas as u16).map(|n| cluster.cpu(n).to_vec()).collect();
    cluster.run_until(end);
    let (completed, throughput, mean, p50, p99) = summarize(cluster.completions(), start, end);
    let mut statuses = BTreeMap::new();
    for c in cluster.clients() {
        let s = c.stats();
        *statuses.entry("timeouts".to_string()).or_default() += s.timeouts;
        *statuses.entry("redirects".to_string()).or_default() += s.redirects;
        *statuses.entry("retryable".to_string()).or_default() += s.retryable;
    }
    let interval = 10 * MILLIS;
    let mut buckets = vec![0u64; end.div_ceil(interval) as usize];
    for (t, _) in cluster.completions() {
        if let Some(b) = buckets.get_mut((*t / interval) as usize) {
            *b += 1;
        }
    }
    let timeline = buckets
        .into_iter()
        .enumerate()
        .map(|(i, ops)| IntervalReport { start_ms: (i as u64 * interval) as f64 / 1e6, ops })
        .collect();
    let peak = (0..params.replicas as u16)
        .flat_map(|n| {
            let before = &cpu_at_start[n as usize];
            cluster.cpu(n).iter().zip(before).map(|(a, b)| a.saturating_sub(*b)).collect::<Vec<_>>()
        })
        .max()
        .unwrap_or(0) as f64
        / spec.duration as f64;
    let net = cluster.net().stats();
    BenchReport {
        preset: spec.name.clone(),
        transport: "sim".into(),
        replicas: params.replicas,
        logs: params.logs,
        clients: spec.clients,
        seed: params.seed,
        batching: params.batching,
        measured_ms: spec.duration as f64 / 1e6,
        completed,
        throughput_ops_per_sec: throughput,
        latency_mean_us: mean,
        latency_p50_us: p50,
        latency_p99_us: p99,
        statuses,
        packets_sent: net.sent,
        packets_dropped: net.dropped,
        peak_instance_utilization: peak,
        timeline,
    }
}

/// Throughput and latency for increasing client counts.
pub fn sweep(spec: &WorkloadSpec, params: &SimParams, clients: &[usize]) -> Vec<BenchReport> {
    clients.iter().map(|&c| run_sim(&WorkloadSpec { clients: c, ..spec.clone() }, params)).collect()
}

/// Best throughput over a client sweep.
pub fn peak_throughput(spec: &WorkloadSpec, params: &SimParams, clients: &[usize]) -> f64 {
    sweep(spec, params, clients).iter().map(|r| r.throughput_ops_per_sec).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailoverParams {
    pub sim: SimParams,
    pub clients: usize,
    /// Kill time.
    pub kill_at: Nanos,
    /// Kill a follower instead of the leader.
    pub kill_follower: bool,
    /// Restart the killed node this long after the kill.
    pub restart_after: Option<Nanos>,
    /// Total run time.
    pub run_for: Nanos,
}

impl Default for FailoverParams {
    fn default() -> Self {
        FailoverParams {
            sim: SimParams { logs: 1, raft: RaftConfig::failover(), ..Default::default() },
            clients: 8,
            kill_at: 300 * MILLIS,
            kill_follower: false,
            restart_after: None,
            run_for: 800 * MILLIS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailoverReport {
    pub seed: u64,
    pub victim: u16,
    pub killed_leader: bool,
    pub kill_at_ms: f64,
    /// Longest stretch without a completed operation around the kill.
    pub gap_ms: f64,
    pub new_leader: Option<u16>,
    pub converged: Option<bool>,
    /// Completed operations per millisecond.
    pub timeline: Vec<u64>,
}

/// Longest interval without completions that overlaps `[from, to)`,
/// counting from the last completion at or before `from`.
pub fn service_gap(completions: &[(Nanos, Nanos)], from: Nanos, to: Nanos) -> Nanos {
    let mut times: Vec<Nanos> = completions.iter().map(|(t, _)| *t).collect();
    times.sort_unstable();
    let mut prev = times.iter().rev().find(|&&t| t <= from).copied().unwrap_or(from);
    let mut gap = 0;
    for &t in times.iter().filter(|&&t| t > from && t < to) {
        gap = gap.max(t - prev);
        prev = t;
    }
    gap.max(to - prev)
}

/// Kills a replica under steady load and measures the client-visible gap.
pub fn run_failover(p: &FailoverParams) -> FailoverReport {
    let spec = Preset::Update100.spec();
    let cfg = p.sim.cluster_config(p.clients);
    let mut cluster = Cluster::new(cfg, spec.generator());
    cluster.run_until(p.kill_at);
    let leader = cluster.leader_of(0).unwrap_or(0);
    let victim = if p.kill_follower { (leader + 1) % p.sim.replicas as u16 } else { leader };
    cluster.crash(victim);
    let kill = cluster.now();
    let mut converged = None;
    match p.restart_after {
        Some(d) => {
            cluster.run_until(kill + d);
            cluster.restart(victim);
            cluster.run_until(p.run_for);
            let settled = cluster.quiesce(2_000 * MILLIS);
            let hashes = cluster.state_hashes();
            converged =
                Some(settled && hashes.len() == p.sim.replicas && hashes.iter().all(|(_, h)| *h == hashes[0].1));
        }
        None => cluster.run_until(p.run_for),
    }
    let gap = service_gap(cluster.completions(), kill, p.run_for.min(kill + 500 * MILLIS));
    let mut timeline = vec![0u64; p.run_for.div_ceil(MILLIS) as usize];
    for (t, _) in cluster.completions() {
        if let Some(b) = timeline.get_mut((*t / MILLIS) as usize) {
            *b += 1;
        }
    }
    FailoverReport {
        seed: p.sim.seed,
        victim,
        killed_leader: !p.kill_follower,
        kill_at_ms: kill as f64 / 1e6,
        gap_ms: gap as f64 / 1e6,
        new_leader: cluster.leader_of(0),
        converged,
        timeline,
    }
}
