//! Benchmark runs over real UDP sockets on the loopback interface. Each
//! replica gets a thread and a socket; one more thread drives every client.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{summarize, BenchReport, SimParams, WorkloadSpec};
use crate::client::Client;
use crate::kv::{KvStore, SharedKv};
use crate::medium::MemMedium;
use crate::multilog::Server;
use crate::raft::Nanos;
use crate::request::{ClientId, LogId};
use crate::transport::udp::UdpTransport;
use crate::transport::{Outbox, Transport, RECV_BURST};
use crate::wire::{Addr, NodeId};

fn elapsed(epoch: Instant) -> Nanos {
    epoch.elapsed().as_nanos() as Nanos
}

fn node_loop(mut server: Server<MemMedium>, mut net: UdpTransport, epoch: Instant, stop: Arc<AtomicBool>) {
    let logs = server.logs() as LogId;
    let mut out = Outbox::new(net.mtu());
    while !stop.load(Ordering::Relaxed) {
        let now = elapsed(epoch);
        let next = (0..logs).map(|l| server.next_deadline(l)).min().unwrap_or(now);
        let wait = Duration::from_nanos(next.saturating_sub(now).min(1_000_000));
        if net.poll(wait).is_err() {
            break;
        }
        let now = elapsed(epoch);
        for log in 0..logs {
            let packets = net.recv_batch(log, RECV_BURST);
            server.run_instance(log, now, packets, &mut out);
            net.flush(&mut out);
        }
    }
}

/// Runs `spec` against `params.replicas` local replicas talking UDP.
pub fn run_udp(spec: &WorkloadSpec, params: &SimParams) -> io::Result<BenchReport> {
    let cfg = params.cluster_config(spec.clients);
    let any: SocketAddr = "127.0.0.1:0".parse().expect("loopback address");
    let mut node_nets = Vec::new();
    let mut addrs = HashMap::new();
    for n in 0..params.replicas as NodeId {
        let t = UdpTransport::bind(Addr::Node(n), any, HashMap::new())?;
        addrs.insert(n, t.local_addr()?);
        node_nets.push(t);
    }
    let epoch = Instant::now();
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    for (n, mut net) in node_nets.into_iter().enumerate() {
        for (&peer, &a) in &addrs {
            net.set_node(peer, a);
        }
        let media =
            (0..params.logs).map(|_| (MemMedium::new(cfg.storage.nvm.region_bytes), MemMedium::new(0))).collect();
        let mut server_cfg = cfg.server;
        server_cfg.nodes = params.replicas;
        server_cfg.logs = params.logs;
        let seed = params.seed.wrapping_mul(31).wrapping_add(n as u64);
        let server = Server::open(n as NodeId, server_cfg, cfg.storage, media, SharedKv::new(KvStore::new()), seed, 0)
            .map_err(io::Error::other)?;
        let stop = Arc::clone(&stop);
        threads.push(thread::spawn(move || node_loop(server, net, epoch, stop)));
    }

    let mut client_cfg = cfg.client;
    client_cfg.nodes = params.replicas;
    client_cfg.logs = params.logs;
    let mut clients = Vec::new();
    for i in 0..spec.clients {
        let id = i as ClientId + 1;
        clients.push((Client::new(id, client_cfg), UdpTransport::bind(Addr::Client(id), any, addrs.clone())?));
    }
    let mut workload = spec.generator();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x636c_6965_6e74);
    let mut out = Outbox::new(cfg.net.mtu);
    let mut completions: Vec<(Nanos, Nanos)> = Vec::new();
    // The window opens `warmup` after the first completion.
    let give_up = elapsed(epoch) + 10 * params.raft.election_max + spec.warmup + spec.duration;
    let mut window: Option<(Nanos, Nanos)> = None;
    loop {
        let now = elapsed(epoch);
        if window.is_none() && !completions.is_empty() {
            let start = completions[0].0 + spec.warmup;
            window = Some((start, start + spec.duration));
        }
        let end = window.map_or(give_up, |(_, e)| e);
        if now >= end {
            break;
        }
        let mut busy = false;
        for (client, net) in clients.iter_mut() {
            if client.is_idle() {
                if let Some(op) = workload.next_op(client.id(), now, &mut rng) {
                    client.submit(now, op, &mut out);
                }
            }
            for log in 0..params.logs as LogId {
                for p in net.recv_batch(log, RECV_BURST) {
                    busy = true;
                    if let Some(done) = client.handle(now, p, &mut out) {
                        completions.push((done.completed_at, done.completed_at - done.invoked_at));
                    }
                }
            }
            if let Some(done) = client.tick(now, &mut out) {
                completions.push((done.completed_at, done.completed_at - done.invoked_at));
            }
            net.flush(&mut out);
        }
        if !busy {
            thread::sleep(Duration::from_micros(50));
        }
    }
    stop.store(true, Ordering::Relaxed);
    for t in threads {
        let _ = t.join();
    }

    let (start, end) = window.unwrap_or((give_up, give_up));
    let (completed, throughput, mean, p50, p99) =
        if window.is_some() { summarize(&completions, start, end) } else { (0, 0.0, 0.0, 0.0, 0.0) };
    let mut statuses = BTreeMap::new();
    let mut sent = 0;
    for (c, _) in &clients {
        let s = c.stats();
        sent += s.sent;
        *statuses.entry("timeouts".to_string()).or_default() += s.timeouts;
        *statuses.entry("redirects".to_string()).or_default() += s.redirects;
        *statuses.entry("retryable".to_string()).or_default() += s.retryable;
    }
    Ok(BenchReport {
        preset: spec.name.clone(),
        transport: "udp".into(),
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
        packets_sent: sent,
        packets_dropped: 0,
        peak_instance_utilization: 0.0,
        timeline: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Preset;
    use crate::raft::MILLIS;

    #[test]
    fn loopback_cluster_serves_requests() {
        let spec = WorkloadSpec { clients: 4, duration: 200 * MILLIS, warmup: 20 * MILLIS, ..Preset::Update100.spec() };
        let params = SimParams { logs: 2, ..SimParams::default() };
        let r = run_udp(&spec, &params).unwrap();
        assert!(r.completed > 0, "{r:?}");
        assert_eq!(r.transport, "udp");
    }
}
