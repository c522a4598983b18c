//! Acceptance suite: every criterion at full desk scale, one PASS/FAIL line
//! each. Run with `cargo test -p gradflow-cli --test acceptance -- --nocapture`.

use gradflow_cli::criteria::{run_criterion, Scale};

fn check(id: u8) {
    let report = run_criterion(id, Scale::Desk);
    println!("{}", report.line());
    assert!(report.passed(), "{}", report.line());
}

#[test]
fn c01_euclidean_optimal_cost() {
    check(1);
}

#[test]
fn c02_perturbation_optimality() {
    check(2);
}

#[test]
fn c03_euclidean_dissipation() {
    check(3);
}

#[test]
fn c04_sgd_reduction() {
    check(4);
}

#[test]
fn c05_ou_moments() {
    check(5);
}

#[test]
fn c06_fisher_dissipation() {
    check(6);
}

#[test]
fn c07_fluid_action() {
    check(7);
}

#[test]
fn c08_virial() {
    check(8);
}

#[test]
fn c09_product_structure() {
    check(9);
}

#[test]
fn c10_divergence_rate() {
    check(10);
}

#[test]
fn c11_transport_rate() {
    check(11);
}

#[test]
fn c12_product_action() {
    check(12);
}

#[test]
fn c13_barycenter_limit() {
    check(13);
}

#[test]
fn c14_diagnostics() {
    check(14);
}

#[test]
fn c15_determinism() {
    check(15);
}
