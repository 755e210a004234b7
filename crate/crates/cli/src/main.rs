use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cyclone::bench::{self, FailoverParams, FailoverReport, Preset, SimParams};
use cyclone::flashlog;
use cyclone::live;
use cyclone::medium::FileMedium;
use cyclone::raft::{Nanos, RaftConfig, MILLIS};

#[derive(Parser)]
#[command(name = "cyclone", version, about = "Replicated write-ahead log benchmarks and tools")]
struct Cli {
    /// Cluster config file (TOML or JSON). Defaults to $CYCLONE_CONFIG.
    #[arg(long, global = true, env = "CYCLONE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportKind {
    Sim,
    Udp,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload preset and report throughput and latency.
    Bench {
        #[arg(long, default_value = "update100")]
        preset: String,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        logs: Option<usize>,
        #[arg(long, value_enum, default_value = "sim")]
        transport: TransportKind,
        #[arg(long)]
        seed: Option<u64>,
        /// Closed-loop clients; a comma-separated list runs a sweep.
        #[arg(long, value_delimiter = ',')]
        clients: Vec<usize>,
        #[arg(long)]
        duration_ms: Option<u64>,
        #[arg(long)]
        no_batching: bool,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print CSV rows instead of the JSON report.
        #[arg(long)]
        csv: bool,
    },
    /// Kill a replica under load and measure the client-visible service gap.
    Failover {
        #[arg(long)]
        replicas: Option<usize>,
        /// First seed of the sweep.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        kill_follower: bool,
        /// Restart the victim after this many milliseconds and check convergence.
        #[arg(long)]
        restart_after_ms: Option<u64>,
        /// Include the per-millisecond completion timeline.
        #[arg(long)]
        timeline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a flashlog file.
    Fsck {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Contents of the config file. Deployment fields sit at the top level;
/// `[workload]` and `[failover]` tune the subcommands.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    sim: SimParams,
    workload: WorkloadOverrides,
    failover: FailoverOverrides,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct WorkloadOverrides {
    clients: Option<usize>,
    keys: Option<u64>,
    duration_ms: Option<u64>,
    warmup_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FailoverOverrides {
    clients: Option<usize>,
    kill_at_ms: Option<u64>,
    run_for_ms: Option<u64>,
    raft: Option<RaftConfig>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn ms(v: u64) -> Nanos {
    v * MILLIS
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd(
    cfg: FileConfig,
    preset: &str,
    replicas: Option<usize>,
    logs: Option<usize>,
    transport: TransportKind,
    seed: Option<u64>,
    clients: Vec<usize>,
    duration_ms: Option<u64>,
    no_batching: bool,
    out: Option<&Path>,
    csv: bool,
) -> Result<()> {
    let Some(p) = Preset::parse(preset) else {
        let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
        bail!("unknown preset {preset:?}; expected one of {}", names.join(", "));
    };
    let mut spec = p.spec();
    let w = &cfg.workload;
    if let Some(c) = w.clients {
        spec.clients = c;
    }
    if let Some(k) = w.keys {
        spec.keys = k;
    }
    if let Some(d) = duration_ms.or(w.duration_ms) {
        spec.duration = ms(d);
    }
    if let Some(d) = w.warmup_ms {
        spec.warmup = ms(d);
    }
    spec.validate().map_err(anyhow::Error::msg)?;

    let mut params = cfg.sim;
    params.replicas = replicas.unwrap_or(params.replicas);
    params.logs = logs.unwrap_or(params.logs);
    params.seed = seed.unwrap_or(params.seed);
    if no_batching {
        params.batching = false;
    }
    if params.replicas == 0 || params.logs == 0 {
        bail!("replicas and logs must be positive");
    }

    let loads = if clients.is_empty() { vec![spec.clients] } else { clients };
    let mut reports = Vec::new();
    for c in loads {
        let s = bench::WorkloadSpec { clients: c, ..spec.clone() };
        let r = match transport {
            TransportKind::Sim => bench::run_sim(&s, &params),
            TransportKind::Udp => live::run_udp(&s, &params).context("running the UDP cluster")?,
        };
        eprintln!(
            "{} clients: {:.0} ops/s, p50 {:.1} us, p99 {:.1} us",
            c, r.throughput_ops_per_sec, r.latency_p50_us, r.latency_p99_us
        );
        reports.push(r);
    }
    if csv {
        println!("{}", bench::BenchReport::csv_header());
        for r in &reports {
            println!("{}", r.csv_row());
        }
        if let Some(o) = out {
            write_json(&reports, Some(o))?;
        }
        return Ok(());
    }
    if reports.len() == 1 {
        write_json(&reports[0], out)
    } else {
        write_json(&reports, out)
    }
}

#[derive(Serialize)]
struct FailoverSummary {
    runs: Vec<FailoverReport>,
    gap_ms_median: f64,
    gap_ms_p95: f64,
    gap_ms_max: f64,
}

#[allow(clippy::too_many_arguments)]
fn failover_cmd(
    cfg: FileConfig,
    replicas: Option<usize>,
    seed: u64,
    seeds: u64,
    kill_follower: bool,
    restart_after_ms: Option<u64>,
    timeline: bool,
    out: Option<&Path>,
) -> Result<()> {
    let defaults = FailoverParams::default();
    let f = &cfg.failover;
    let mut sim = SimParams { logs: 1, raft: f.raft.unwrap_or(defaults.sim.raft), ..cfg.sim };
    sim.replicas = replicas.unwrap_or(sim.replicas);
    let mut runs = Vec::new();
    for s in seed..seed + seeds.max(1) {
        let p = FailoverParams {
            sim: SimParams { seed: s, ..sim },
            clients: f.clients.unwrap_or(defaults.clients),
            kill_at: f.kill_at_ms.map_or(defaults.kill_at, ms),
            kill_follower,
            restart_after: restart_after_ms.map(ms),
            run_for: f.run_for_ms.map_or(defaults.run_for, ms),
        };
        let mut r = bench::run_failover(&p);
        eprintln!(
            "seed {s}: killed n{} at {:.1} ms, gap {:.1} ms, new leader {:?}{}",
            r.victim,
            r.kill_at_ms,
            r.gap_ms,
            r.new_leader,
            r.converged.map(|c| format!(", converged {c}")).unwrap_or_default()
        );
        if !timeline {
            r.timeline.clear();
        }
        runs.push(r);
    }
    let mut gaps: Vec<f64> = runs.iter().map(|r| r.gap_ms).collect();
    gaps.sort_by(f64::total_cmp);
    let at = |q: f64| gaps[((gaps.len() as f64 * q).ceil() as usize).clamp(1, gaps.len()) - 1];
    let summary = FailoverSummary { gap_ms_median: at(0.5), gap_ms_p95: at(0.95), gap_ms_max: at(1.0), runs };
    write_json(&summary, out)
}

fn fsck_cmd(file: &Path, json: bool) -> Result<bool> {
    let medium = FileMedium::open_existing(file).with_context(|| format!("opening {}", file.display()))?;
    let r = flashlog::fsck(&medium)?;
    if json {
        let v = serde_json::json!({
            "file": file.display().to_string(),
            "clean": r.is_clean(),
            "file_len": r.file_len,
            "segments": r.segments,
            "pages_used": r.pages_used,
            "fragments": r.fragments,
            "records": r.records,
            "lsns": r.lsns,
            "indexes": r.indexes,
            "end_offset": r.end_offset,
            "tail": r.tail,
            "errors": r.errors,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("{}: {} bytes, {} segments, {} pages in use", file.display(), r.file_len, r.segments, r.pages_used);
        println!("  {} records in {} fragments, end at offset {}", r.records, r.fragments, r.end_offset);
        if let Some((a, b)) = r.lsns {
            println!("  lsn {a}..={b}");
        }
        if let Some((a, b)) = r.indexes {
            println!("  index {a}..={b}");
        }
        if let Some(t) = &r.tail {
            println!("  recoverable tail: {t}");
        }
        for e in &r.errors {
            println!("  error: {e}");
        }
        println!("  {}", if r.is_clean() { "clean" } else { "CORRUPT" });
    }
    Ok(r.is_clean())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Bench { preset, replicas, logs, transport, seed, clients, duration_ms, no_batching, out, csv } => {
            bench_cmd(
                cfg,
                &preset,
                replicas,
                logs,
                transport,
                seed,
                clients,
                duration_ms,
                no_batching,
                out.as_deref(),
                csv,
            )?;
            Ok(true)
        }
        Command::Failover { replicas, seed, seeds, kill_follower, restart_after_ms, timeline, out } => {
            failover_cmd(cfg, replicas, seed, seeds, kill_follower, restart_after_ms, timeline, out.as_deref())?;
            Ok(true)
        }
        Command::Fsck { file, json } => fsck_cmd(&file, json),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
