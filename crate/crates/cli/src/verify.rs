//! The `verify` identity suite: every acceptance criterion at reduced scale
//! plus the objective and Boltzmann invariants.

use gradflow::nalgebra::DMatrix;
use gradflow::objectives::{boltzmann_density, gradient_fd_error};
use gradflow::perturb::{sample_rng, standard_normal_vec};
use gradflow::{DoubleWell, Grid, Linear, Objective, Potential, Quadratic};
use serde_json::json;

use crate::config::Kind;
use crate::criteria::{run_all, CriterionReport, Scale};
use crate::run::{Check, Outcome};
use crate::CliError;

/// `H + c`, for the shift-invariance check.
#[derive(Debug)]
struct Shifted(Quadratic, f64);

impl Objective for Shifted {
    fn dimension(&self) -> usize {
        self.0.dimension()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.0.value(x) + self.1
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.0.gradient(x)
    }

    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.0.hessian(x)
    }
}

fn objective_checks() -> gradflow::Result<Vec<Check>> {
    let objectives: Vec<(&str, Box<dyn Objective>)> = vec![
        ("quadratic_diag", Box::new(Quadratic::diagonal(&[1.0, 4.0])?)),
        (
            "quadratic_full",
            Box::new(Quadratic::from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]], &[0.5, -0.5])?),
        ),
        ("double_well", Box::new(DoubleWell)),
        (
            "linear",
            Box::new(Linear {
                slope: vec![0.5, -2.0, 1.0],
                offset: 3.0,
            }),
        ),
    ];
    let mut checks = Vec::new();
    for (name, f) in &objectives {
        let mut worst: f64 = 0.0;
        for k in 0..100 {
            let z = standard_normal_vec(&mut sample_rng(21, k), f.dimension());
            // Map normals into [−3, 3] smoothly.
            let x: Vec<f64> = z.iter().map(|v| 3.0 * v.tanh()).collect();
            worst = worst.max(gradient_fd_error(f.as_ref(), &x, 1e-5));
        }
        checks.push(Check::at_most(format!("gradient_fd_{name}"), worst, 1e-5));
    }

    let grid = Grid::uniform_1d(-10.0, 10.0, 2001)?;
    let base = Potential::new(std::sync::Arc::new(Quadratic::diagonal(&[1.0])?), 2.0)?;
    let shifted = Potential::new(std::sync::Arc::new(Shifted(Quadratic::diagonal(&[1.0])?, 7.5)), 2.0)?;
    let a = boltzmann_density(&base, &grid)?;
    let b = boltzmann_density(&shifted, &grid)?;
    checks.push(Check::at_most("boltzmann_mass", (a.mass() - 1.0).abs(), 1e-12));
    checks.push(Check::at_most("boltzmann_shift_invariance", a.max_abs_diff(&b), 1e-12));
    // Variance kT for H = x²/2.
    checks.push(Check::at_most("boltzmann_second_moment", (a.variance()[0] - 2.0).abs(), 1e-6));
    Ok(checks)
}

/// Runs the suite. The pass/fail table in the summary has one line per
/// criterion.
pub fn run_suite() -> Result<Outcome, CliError> {
    let reports: Vec<CriterionReport> = run_all(Scale::Quick);
    let mut checks: Vec<Check> = Vec::new();
    let invariants = match objective_checks() {
        Ok(c) => c,
        Err(e) => vec![Check::flag(format!("objective_invariants: {e}"), false)],
    };
    let invariants_pass = invariants.iter().all(|c| c.passed);
    let mut lines: Vec<String> = reports.iter().map(CriterionReport::line).collect();
    lines.push(format!(
        "{}  - objective and Boltzmann invariants ({} checks)",
        if invariants_pass { "PASS" } else { "FAIL" },
        invariants.len()
    ));
    for r in &reports {
        for c in &r.checks {
            let mut c = c.clone();
            c.name = format!("c{:02}.{}", r.id, c.name);
            checks.push(c);
        }
    }
    checks.extend(invariants.into_iter().map(|mut c| {
        c.name = format!("invariant.{}", c.name);
        c
    }));
    Ok(Outcome {
        kind: Kind::Verify,
        files: Vec::new(),
        checks,
        summary: json!({ "table": lines, "criteria": reports }),
    })
}
