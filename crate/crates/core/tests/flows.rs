//! End-to-end runs that cross module boundaries: flows produced by one module
//! are scored with the functionals of another.

use std::sync::Arc;

use gradflow::density::{relative_entropy, wasserstein1d};
use gradflow::euclidean::{action_euclidean, gradient_flow, Weighting};
use gradflow::product::{product_flow_run, ProductState};
use gradflow::wasserstein::fokker_planck_flow;
use gradflow::{DoubleWell, Grid, GridDensity, Objective, Potential, Quadratic};

#[test]
fn double_well_action_equals_initial_height() {
    // Non-quadratic objective: the identity holds up to the RK4 and
    // trapezoid errors only.
    let f = DoubleWell;
    for x0 in [[0.3], [-1.7], [1.2]] {
        let traj = gradient_flow(&f, &x0, 4.0, 1e-3).unwrap();
        let cost = action_euclidean(&traj, &f, &Weighting::Identity, Some(1e-6)).unwrap();
        assert!((cost.total - f.value(&x0)).abs() < 1e-4, "{x0:?}: {cost:?}");
        assert!(cost.terminal <= f.value(&x0));
    }
}

#[test]
fn fokker_planck_report_matches_recomputed_functionals() {
    let grid = Grid::uniform_1d(-10.0, 10.0, 401).unwrap();
    let pot = Potential::new(Arc::new(Quadratic::diagonal(&[1.0]).unwrap()), 1.0).unwrap();
    let rho0 = GridDensity::gaussian(&grid, &[2.0], 0.25).unwrap();
    let run = fokker_planck_flow(&rho0, &pot, 0.5, 1e-4).unwrap();

    let last = run.snapshots.last().unwrap();
    let d_last = relative_entropy(last, &run.reference).unwrap();
    assert!((d_last - run.report.terminal_divergence).abs() < 1e-12);

    // The flow contracts toward the reference in W2 as well.
    let w_first = wasserstein1d(&run.snapshots[0], &run.reference).unwrap();
    let w_last = wasserstein1d(last, &run.reference).unwrap();
    assert!(w_last < w_first * (-0.5f64).exp() * 1.01, "{w_first} -> {w_last}");

    // Mean relaxes like e^{-t}.
    let mean = last.mean()[0];
    assert!((mean - 2.0 * (-0.5f64).exp()).abs() < 5e-3, "{mean}");
}

#[test]
fn product_run_conserves_the_sum_and_decreases_divergence() {
    let grid = Grid::uniform_1d(-8.0, 8.0, 321).unwrap();
    let a = GridDensity::gaussian(&grid, &[-1.0], 0.5).unwrap();
    let b = GridDensity::gaussian(&grid, &[1.0], 0.5).unwrap();
    let state = ProductState::new(a.clone(), b.clone()).unwrap();
    let run = product_flow_run(&state, 2.0, 0.05).unwrap();

    let end = run.snapshots.last().unwrap();
    let sum = end.sum_field();
    let drift = sum
        .iter()
        .zip(&run.initial_sum)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-12, "{drift}");

    let d = &run.report.divergence_series;
    assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-8));
    let d_end = relative_entropy(end.tilde(), end.rho()).unwrap();
    assert!((d_end - d.last().unwrap()).abs() < 1e-10);

    // Both components move toward each other.
    let w0 = wasserstein1d(&a, &b).unwrap();
    let w1 = wasserstein1d(end.tilde(), end.rho()).unwrap();
    assert!(w1 < w0, "{w0} -> {w1}");
}
