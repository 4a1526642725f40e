mod common;

use common::gradcheck::{run_trials, suite, TOL_F32, TOL_F64};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, trial) in suite() {
        let err = run_trials(name, trial).unwrap();
        eprintln!("{name:<22} f32 {:.2e}  f64 {:.2e}", err.f32, err.f64);
        if !err.passes() {
            failures.push(format!("{name}: f32 {:.2e} (tol {TOL_F32:.0e}), f64 {:.2e} (tol {TOL_F64:.0e})", err.f32, err.f64));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
