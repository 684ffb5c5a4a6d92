//! Acceptance criteria AC1 to AC14, one test each. Every test writes a
//! PASS/FAIL line (plus per-check details) straight to stderr so the verdicts
//! show up even when the harness captures output.
//!
//! Run with `cargo test -p brwtail-core --test acceptance`.

use std::io::Write;
use std::sync::{Mutex, OnceLock};

use brwtail::harness::verify::{verify, Criterion, VerifyContext};

const SEED: u64 = 20240611;

fn context() -> &'static VerifyContext {
    static CTX: OnceLock<VerifyContext> = OnceLock::new();
    CTX.get_or_init(|| VerifyContext::new(SEED))
}

fn check(id: u8) {
    // one criterion at a time so runtime budgets are measured on an idle pool
    static SERIAL: Mutex<()> = Mutex::new(());
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let criterion = Criterion::new(id).unwrap();
    let report = match verify(criterion, context()) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "{criterion} FAIL {} (error: {e})", criterion.title());
            panic!("{criterion} errored: {e}");
        }
    };
    let _ = writeln!(std::io::stderr(), "{}\n{}", report.line(), report.details());
    assert!(report.passed, "{}", report.line());
}

#[test]
fn ac01_calibration_and_transform() {
    check(1);
}

#[test]
fn ac02_renewal_oracle() {
    check(2);
}

#[test]
fn ac03_conditioned_walk() {
    check(3);
}

#[test]
fn ac04_martingale_identities() {
    check(4);
}

#[test]
fn ac05_untruncated_polynomial_tail() {
    check(5);
}

#[test]
fn ac06_derivative_martingale_cauchy_tail() {
    check(6);
}

#[test]
fn ac07_truncated_exponential_tails() {
    check(7);
}

#[test]
fn ac08_x_dependence() {
    check(8);
}

#[test]
fn ac09_minimum_bound() {
    check(9);
}

#[test]
fn ac10_importance_sampling_consistency() {
    check(10);
}

#[test]
fn ac11_perpetuity() {
    check(11);
}

#[test]
fn ac12_mgf_recursion() {
    check(12);
}

#[test]
fn ac13_synthetic_fitter_oracles() {
    check(13);
}

#[test]
fn ac14_determinism() {
    check(14);
}
