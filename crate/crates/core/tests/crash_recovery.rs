mod common;

use common::crash::explore;

#[test]
fn every_crash_point_recovers_a_consistent_prefix() {
    let s = explore(1, 150);
    assert!(s.page_points > 0, "workload produced no multi-page flashlog writes");
    assert!(
        s.failures.is_empty(),
        "{} of {} points failed: {:?}",
        s.failures.len(),
        s.points,
        &s.failures[..s.failures.len().min(5)]
    );
    println!("{} crash points ({} barriers, {} page cuts)", s.points, s.barrier_points, s.page_points);
}
