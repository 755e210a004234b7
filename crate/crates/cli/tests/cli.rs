use std::path::Path;
use std::process::Command;

use cyclone::flashlog::{FlashConfig, FlashLog, SEGMENT_SIZE};
use cyclone::medium::{FileMedium, MemMedium};
use cyclone::nvm::{NvmConfig, NvmRegion};

fn cyclone() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cyclone"));
    c.env_remove("CYCLONE_CONFIG");
    c
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bench_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let status = cyclone()
        .args(["bench", "--preset", "update100", "--replicas", "3", "--logs", "2", "--transport", "sim"])
        .args(["--seed", "5", "--clients", "8", "--duration-ms", "20", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let r = json(&out);
    assert_eq!(r["logs"], 2);
    assert_eq!(r["transport"], "sim");
    assert!(r["completed"].as_u64().unwrap() > 0);
}

#[test]
fn config_file_sets_deployment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cluster.toml");
    std::fs::write(&cfg, "replicas = 5\nlogs = 3\n\n[workload]\nclients = 4\nduration_ms = 20\n").unwrap();
    let out = dir.path().join("report.json");
    let status = cyclone().env("CYCLONE_CONFIG", &cfg).args(["bench", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let r = json(&out);
    assert_eq!(r["replicas"], 5);
    assert_eq!(r["logs"], 3);
    assert_eq!(r["clients"], 4);

    let cfg = dir.path().join("cluster.json");
    std::fs::write(&cfg, r#"{"logs": 1, "workload": {"clients": 2, "duration_ms": 20}}"#).unwrap();
    let status =
        cyclone().arg("--config").arg(&cfg).args(["bench", "--logs", "2", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    assert_eq!(json(&out)["logs"], 2, "flags override the file");
}

#[test]
fn unknown_preset_is_rejected() {
    let out = cyclone().args(["bench", "--preset", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn failover_reports_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("failover.json");
    let status = cyclone().args(["failover", "--seeds", "2", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let r = json(&out);
    assert_eq!(r["runs"].as_array().unwrap().len(), 2);
    let p95 = r["gap_ms_p95"].as_f64().unwrap();
    assert!(p95 > 0.0 && p95 < 500.0, "{p95}");
}

fn write_flashlog(path: &Path, records: u64) {
    let ncfg = NvmConfig { region_bytes: 1 << 20, ring_capacity: 256, max_entry: 9000, reserve_slots: 0 };
    let mut nvm = NvmRegion::open_or_format(MemMedium::new(ncfg.region_bytes), ncfg).unwrap();
    let (medium, _) = FileMedium::open_or_create(path, 0).unwrap();
    let cfg = FlashConfig { prealloc_chunk: 2 * SEGMENT_SIZE as u64, ..Default::default() };
    let (mut flash, _) = FlashLog::open(medium, cfg).unwrap();
    for i in 0..records {
        nvm.append(1, i + 1, &vec![i as u8 | 1; 100 + (i as usize * 37) % 3000]).unwrap();
    }
    flash.drain_step(&mut nvm, Some(records - 1), true).unwrap();
}

#[test]
fn fsck_accepts_generated_files_and_flags_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log0.flash");
    write_flashlog(&path, 120);
    let out = cyclone().args(["fsck", "--json"]).arg(&path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["records"], 120);
    assert_eq!(r["clean"], true);

    let mut bytes = std::fs::read(&path).unwrap();
    let end = r["end_offset"].as_u64().unwrap() as usize;
    bytes[end + 5000] = 0x5a;
    std::fs::write(&path, bytes).unwrap();
    let out = cyclone().arg("fsck").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("CORRUPT"));
}
