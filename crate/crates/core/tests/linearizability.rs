mod common;

use common::traces::history_trace;

#[test]
fn fault_histories_are_linearizable_per_key() {
    let mut ops = 0;
    for seed in 0..12u64 {
        let h = history_trace(seed, 200, 20);
        assert!(h.bad_keys.is_empty(), "seed {seed}: non-linearizable keys {:?}", h.bad_keys);
        assert!(h.weak_problems.is_empty(), "seed {seed}: {:?}", h.weak_problems);
        assert!(h.journal_problems.is_empty(), "seed {seed}: {:?}", h.journal_problems);
        assert!(h.trace.safety.is_empty(), "seed {seed}: {:?}", h.trace.safety);
        assert!(h.trace.converged, "seed {seed}");
        ops += h.operations;
    }
    assert!(ops > 12 * 100, "histories too short: {ops} operations");
}
