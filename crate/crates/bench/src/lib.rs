//! Desk-scale fixtures shared by the benchmarks in `benches/`.

use std::sync::Arc;

use gradflow::product::ProductState;
use gradflow::wasserstein::FokkerPlanck;
use gradflow::{Grid, GridDensity, Potential, Quadratic};

/// `½xᵀdiag(1,4)x`.
pub fn desk_quadratic() -> Quadratic {
    Quadratic::diagonal(&[1.0, 4.0]).expect("positive diagonal")
}

/// OU stepper on `[−10, 10]` with `N(2, 0.25)` as the start.
pub fn ou_case(nodes: usize) -> (FokkerPlanck, GridDensity) {
    let grid = Grid::uniform_1d(-10.0, 10.0, nodes).expect("valid grid");
    let pot = Potential::new(Arc::new(Quadratic::diagonal(&[1.0]).expect("diag")), 1.0).expect("kT > 0");
    let stepper = FokkerPlanck::new(&pot, &grid).expect("stepper");
    let rho = GridDensity::gaussian(&grid, &[2.0], 0.25).expect("gaussian");
    (stepper, rho)
}

/// `N(−1, 0.5)` against `N(1, 0.5)` on `[−8, 8]`.
pub fn product_pair(nodes: usize) -> ProductState {
    let grid = Grid::uniform_1d(-8.0, 8.0, nodes).expect("valid grid");
    let a = GridDensity::gaussian(&grid, &[-1.0], 0.5).expect("gaussian");
    let b = GridDensity::gaussian(&grid, &[1.0], 0.5).expect("gaussian");
    ProductState::new(a, b).expect("matching grids")
}
