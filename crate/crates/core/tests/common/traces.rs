//! Seeded fault-injected cluster traces shared by the integration tests.

use std::collections::{BTreeMap, HashMap};

use cyclone::check;
use cyclone::cluster::{Cluster, ClusterConfig, GangOutcome, Workload};
use cyclone::multilog::route;
use cyclone::payload::CopyStats;
use cyclone::raft::{Nanos, RaftConfig, MICROS, MILLIS};
use cyclone::request::{ClientId, GangSection, LogId, Op, Status, WriteOp};
use cyclone::wire::NodeId;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub enum Fault {
    /// Split the replicas into two groups.
    Partition(Vec<NodeId>),
    Heal,
    /// Crash whichever node leads `log` at that moment.
    KillLeader(LogId),
    Crash(NodeId),
    /// Restart every crashed node.
    RestartAll,
    SetDrop(f64),
}

#[derive(Debug, Clone)]
pub struct FaultPlan {
    pub replicas: usize,
    pub drop_rate: f64,
    pub reorder_rate: f64,
    pub duplicate_rate: f64,
    pub events: Vec<(Nanos, Fault)>,
    /// Faults stop and the trace quiesces after this time.
    pub horizon: Nanos,
}

impl FaultPlan {
    /// Random faults for a trace of `horizon` virtual time.
    pub fn random(rng: &mut ChaCha8Rng, replicas: usize, horizon: Nanos) -> Self {
        let mut events = Vec::new();
        let faults = rng.random_range(1..6);
        for _ in 0..faults {
            let at = rng.random_range(20 * MILLIS..horizon);
            let f = match rng.random_range(0..6) {
                0 | 1 => Fault::KillLeader(0),
                2 => Fault::Crash(rng.random_range(0..replicas) as NodeId),
                3 => {
                    let mut nodes: Vec<NodeId> = (0..replicas as NodeId).collect();
                    nodes.shuffle(rng);
                    let k = rng.random_range(1..replicas);
                    Fault::Partition(nodes[..k].to_vec())
                }
                4 => Fault::SetDrop(rng.random_range(0.0..0.2)),
                _ => Fault::RestartAll,
            };
            events.push((at, f));
            // Most disruptions are repaired a little later.
            if rng.random_bool(0.7) {
                let later = (at + rng.random_range(10 * MILLIS..150 * MILLIS)).min(horizon);
                events.push((later, if rng.random_bool(0.5) { Fault::Heal } else { Fault::RestartAll }));
            }
        }
        events.sort_by_key(|(t, _)| *t);
        FaultPlan {
            replicas,
            drop_rate: rng.random_range(0.0..0.2),
            reorder_rate: rng.random_range(0.0..0.3),
            duplicate_rate: rng.random_range(0.0..0.05),
            events,
            horizon,
        }
    }

    pub fn apply(&self, c: &mut ClusterConfig) {
        c.net.drop_rate = self.drop_rate;
        c.net.reorder_rate = self.reorder_rate;
        c.net.duplicate_rate = self.duplicate_rate;
    }
}

fn inject(cluster: &mut Cluster, f: &Fault) {
    match f {
        Fault::Partition(side) => {
            let rest: Vec<NodeId> = (0..cluster.config().nodes as NodeId).filter(|n| !side.contains(n)).collect();
            cluster.net().partition(&[side.clone(), rest]);
        }
        Fault::Heal => cluster.net().heal(),
        Fault::KillLeader(log) => {
            if let Some(l) = cluster.leader_of(*log) {
                cluster.crash(l);
            }
        }
        Fault::Crash(n) => cluster.crash(*n),
        Fault::RestartAll => {
            for n in 0..cluster.config().nodes as NodeId {
                cluster.restart(n);
            }
        }
        Fault::SetDrop(p) => {
            let mut cfg = *cluster.net().config();
            cfg.drop_rate = *p;
            cluster.net().set_config(cfg);
        }
    }
}

/// Result of one trace after it quiesced.
#[derive(Debug, Default)]
pub struct TraceOutcome {
    pub seed: u64,
    pub safety: Vec<String>,
    pub settled: bool,
    pub converged: bool,
    pub payload_copies: u64,
    pub completed: usize,
    pub elections: u64,
}

/// Drives `cluster` through `plan`, restarts every crashed node, quiesces
/// and collects safety and convergence results.
pub fn drive(cluster: &mut Cluster, plan: &FaultPlan, seed: u64) -> TraceOutcome {
    let copies_before = CopyStats::current();
    for (at, f) in &plan.events {
        cluster.run_until(*at);
        inject(cluster, f);
    }
    cluster.run_until(plan.horizon);
    for n in 0..plan.replicas as NodeId {
        cluster.restart(n);
    }
    let settled = cluster.quiesce(5_000 * MILLIS);
    let hashes = cluster.state_hashes();
    let converged = settled && hashes.len() == plan.replicas && hashes.iter().all(|(_, h)| *h == hashes[0].1);
    TraceOutcome {
        seed,
        safety: cluster.monitor.violations.clone(),
        settled,
        converged,
        payload_copies: CopyStats::current().since(copies_before).payload_copies,
        completed: cluster.completions().len(),
        elections: cluster.monitor.elections,
    }
}

fn base_config(replicas: usize, logs: usize, seed: u64, clients: usize) -> ClusterConfig {
    let mut c = ClusterConfig::new(replicas, logs, seed);
    c.server.raft = RaftConfig::failover();
    c.clients = clients;
    c.check_interval = 2_000;
    c.think_time = THINK_TIME;
    c
}

/// Spreads each client's operations across the fault schedule.
pub const THINK_TIME: Nanos = 2 * MILLIS;

/// Closed-loop puts, deletes and reads over a few keys with unique values.
/// Each client stops after `ops_per_client` operations or at `until`.
pub fn register_workload(keys: usize, ops_per_client: u64, weak_pct: u32, until: Nanos) -> Box<dyn Workload> {
    let mut issued: HashMap<ClientId, u64> = HashMap::new();
    Box::new(move |c: ClientId, now: Nanos, rng: &mut ChaCha8Rng| {
        let n = issued.entry(c).or_insert(0);
        *n += 1;
        if *n > ops_per_client || now >= until {
            return None;
        }
        let key = format!("key{}", rng.random_range(0..keys)).into_bytes();
        let roll = rng.random_range(0..100);
        Some(if roll < weak_pct {
            Op::WeakGet { key }
        } else if roll < 45 {
            Op::Put { key, value: format!("c{c}-{n}").into_bytes() }
        } else if roll < 55 {
            Op::Delete { key }
        } else {
            Op::Get { key }
        })
    })
}

/// One randomized consensus safety trace.
pub fn safety_trace(seed: u64, replicas: usize) -> TraceOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(150..400) * MILLIS;
    let plan = FaultPlan::random(&mut rng, replicas, horizon);
    let mut cfg = base_config(replicas, 1, seed, 3);
    plan.apply(&mut cfg);
    let mut cluster = Cluster::new(cfg, register_workload(4, 200, 0, horizon));
    drive(&mut cluster, &plan, seed)
}

#[derive(Debug, Default)]
pub struct HistoryOutcome {
    pub trace: TraceOutcome,
    pub operations: usize,
    pub bad_keys: Vec<Vec<u8>>,
    pub weak_problems: Vec<String>,
    pub journal_problems: Vec<String>,
}

/// One trace of quorum and weak reads and writes, checked against the
/// register model, the weak-read rules and the replica journals.
pub fn history_trace(seed: u64, ops_per_client: u64, weak_pct: u32) -> HistoryOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c69_6e65);
    let horizon = rng.random_range(200..500) * MILLIS;
    let plan = FaultPlan::random(&mut rng, 3, horizon);
    let mut cfg = base_config(3, 2, seed, 3);
    cfg.journal = true;
    cfg.record_history = true;
    plan.apply(&mut cfg);
    let mut cluster = Cluster::new(cfg, register_workload(3, ops_per_client, weak_pct, horizon));
    let trace = drive(&mut cluster, &plan, seed);
    let pending: Vec<(Op, Nanos)> = cluster.pending_ops().into_iter().map(|(_, op, t)| (op, t)).collect();
    let history = cluster.history();
    let bad_keys = check::nonlinearizable_keys(history, &pending);
    let journals = cluster.journals();
    let journal_problems = check::journals_agree(&journals);
    let longest = journals
        .iter()
        .max_by_key(|(_, j)| j.values().map(Vec::len).sum::<usize>())
        .map(|(_, j)| j.clone())
        .unwrap_or_default();
    let weak_problems = check::check_weak_reads(history, &longest);
    HistoryOutcome { operations: history.len(), trace, bad_keys, weak_problems, journal_problems }
}

/// A key that routes to `log` among `logs`.
pub fn key_for(log: LogId, logs: usize, salt: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    loop {
        let k = format!("g{salt}-{}", rng.random::<u32>()).into_bytes();
        if route(&k, logs) == log {
            return k;
        }
    }
}

#[derive(Debug, Default)]
pub struct GangOutcomeSummary {
    pub trace: TraceOutcome,
    pub gangs: usize,
    pub failed: usize,
    pub problems: Vec<String>,
}

/// One trace of ganged writes spanning 2 to `logs` logs with leader kills.
pub fn gang_trace(seed: u64, logs: usize) -> GangOutcomeSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_6e67);
    let horizon = rng.random_range(200..400) * MILLIS;
    let mut plan = FaultPlan::random(&mut rng, 3, horizon);
    // Always kill the coordinator at least once, at a random point.
    let at = rng.random_range(30 * MILLIS..horizon);
    plan.events.push((at, Fault::KillLeader(0)));
    plan.events.push(((at + rng.random_range(20..120) * MILLIS).min(horizon), Fault::RestartAll));
    plan.events.sort_by_key(|(t, _)| *t);

    let mut cfg = base_config(3, logs, seed, 4);
    cfg.think_time = 300 * MICROS;
    cfg.server.colocate = true;
    cfg.record_history = true;
    cfg.journal = true;
    plan.apply(&mut cfg);
    let mut issued: HashMap<ClientId, u64> = HashMap::new();
    let workload = Box::new(move |c: ClientId, now: Nanos, rng: &mut ChaCha8Rng| {
        let n = issued.entry(c).or_insert(0);
        *n += 1;
        if *n > 400 || now >= horizon {
            return None;
        }
        let width = rng.random_range(2..=logs);
        let mut chosen: Vec<LogId> = (0..logs as LogId).collect();
        chosen.shuffle(rng);
        let sections = chosen[..width]
            .iter()
            .map(|&log| GangSection {
                log,
                ops: vec![WriteOp::Put {
                    key: key_for(log, logs, c as u64, rng),
                    value: format!("c{c}-{n}").into_bytes(),
                }],
            })
            .collect();
        Some(Op::Gang { sections })
    });
    let mut cluster = Cluster::new(cfg, workload);
    let trace = drive(&mut cluster, &plan, seed);
    let mut problems = Vec::new();
    let outcomes = cluster.monitor.gang_outcomes();
    let mut failed = 0;
    let history: BTreeMap<(ClientId, u64), (Status, u32)> =
        cluster.history().iter().map(|r| ((r.client, r.seq), (r.status, r.attempts))).collect();
    for (nonce, seen) in &outcomes {
        let decided: Vec<GangOutcome> =
            seen.iter().map(|(_, _, o)| *o).filter(|o| *o != GangOutcome::Undecided).collect();
        if decided.contains(&GangOutcome::Partial) {
            problems.push(format!("{nonce:?} partly applied"));
        }
        let applied = decided.contains(&GangOutcome::Applied);
        let skipped = decided.contains(&GangOutcome::Failed);
        if applied && skipped {
            problems.push(format!("{nonce:?} applied at some replicas and skipped at others"));
        }
        let responses = cluster.monitor.gang_responses(*nonce);
        if skipped {
            failed += 1;
            if responses.contains(&Status::Ok) {
                problems.push(format!("{nonce:?} failed but a replica reported success"));
            }
            // The client must have been told to retry, or retried on its own,
            // and the request must eventually finish.
            let req = cluster.monitor.gang_request(*nonce);
            match req.and_then(|r| history.get(&r)) {
                Some((Status::Ok, attempts)) if *attempts > 1 || responses.contains(&Status::GangRetry) => {}
                Some((s, a)) => problems.push(format!("{nonce:?} failed; request finished {s:?} after {a} attempts")),
                None => problems.push(format!("{nonce:?} failed and its request never finished")),
            }
        }
        if applied && responses.contains(&Status::GangRetry) {
            problems.push(format!("{nonce:?} applied but a replica asked for a retry"));
        }
    }
    // Every live replica must have decided every gang it saw in its current
    // incarnation.
    for (nonce, seen) in &outcomes {
        for (node, inc, o) in seen {
            if *o == GangOutcome::Undecided && cluster.is_up(*node) && cluster.incarnation(*node) == *inc {
                problems.push(format!("{nonce:?} undecided at live n{node}"));
            }
        }
    }
    let stuck = cluster.stuck_instances();
    if !stuck.is_empty() {
        problems.push(format!("barrier deadlock at {stuck:?}"));
    }
    GangOutcomeSummary { trace, gangs: outcomes.len(), failed, problems }
}
