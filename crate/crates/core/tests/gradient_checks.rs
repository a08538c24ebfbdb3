mod common;

use std::time::Instant;

#[test]
fn every_op_passes_central_difference_checks() {
    let start = Instant::now();
    let results = common::gradient_suite(2024);
    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<_> = results.iter().filter(|c| !c.passed()).collect();
    for c in &results {
        println!("{:<28} rel err {:.2e} (tol {:.0e})", c.name, c.rel_err, c.tol);
    }
    assert!(failed.is_empty(), "failing checks: {failed:?}");
    assert!(results.len() >= 30, "suite ran only {} checks", results.len());
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1} s");
}

#[test]
fn suite_detects_a_wrong_gradient() {
    let a = [1.0, 2.0, 3.0];
    let n = [1.0, 2.0, 3.1];
    assert!(common::rel_err(&a, &n) > 1e-2);
    assert!(common::rel_err(&a, &a) == 0.0);
}
