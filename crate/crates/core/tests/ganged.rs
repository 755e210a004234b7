mod common;

use common::traces::gang_trace;

#[test]
fn ganged_writes_are_all_or_nothing_under_leader_kills() {
    let (mut gangs, mut failed) = (0, 0);
    for seed in 0..40u64 {
        let logs = 2 + (seed as usize % 7);
        let g = gang_trace(seed, logs);
        assert!(g.problems.is_empty(), "seed {seed} ({logs} logs): {:?}", g.problems);
        assert!(g.trace.safety.is_empty(), "seed {seed}: {:?}", g.trace.safety);
        assert!(g.trace.converged, "seed {seed}: replicas diverged");
        assert_eq!(g.trace.payload_copies, 0, "seed {seed}");
        gangs += g.gangs;
        failed += g.failed;
    }
    assert!(gangs > 1000, "only {gangs} gangs over 40 traces");
    assert!(failed > 0, "no gang was ever interrupted; the faults are not reaching the barrier");
}
