//! Executes a resolved experiment and writes its files.

use std::path::Path;

use gradflow::density::io::write_density;
use gradflow::density::relative_entropy;
use gradflow::euclidean::{
    action_euclidean, dissipation_check_euclidean, flow_for, gradient_norm_sq_series, optimality_gap,
    running_action_series, Weighting, DEFAULT_FEASIBILITY_THRESHOLD,
};
use gradflow::product::{optimality_gap_product, product_flow_run, reff_rate, ProductState, LYAPUNOV_SLACK};
use gradflow::wasserstein::{dissipation_check_fp, fokker_planck_flow, optimality_gap_fp, virial_check};
use gradflow::GapReport;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Kind, PerturbationSpec, Plan};
use crate::output::{columns, snapshot_dir, write_csv, write_json};
use crate::CliError;

/// Perturbation study used by the Euclidean kinds when the config has none.
pub const DEFAULT_PERTURBATION: PerturbationSpec = PerturbationSpec {
    count: 20,
    magnitude: 0.1,
};

/// One identity or invariant checked after a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }

    /// Passes when `value ≥ −tolerance`.
    pub fn at_least_minus(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value >= -tolerance,
        }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: ok,
        }
    }
}

/// What a run produced.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub kind: Kind,
    /// Written files, relative to the output directory.
    pub files: Vec<String>,
    pub checks: Vec<Check>,
    pub summary: Value,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn gap_json(report: &GapReport) -> Value {
    json!({
        "optimal_total": report.optimal_total,
        "samples": report.samples,
        "gap": report.gap,
        "min_perturbed_total": report.min_perturbed_total,
        "median_total": report.median_total(),
        "flagged": report.flagged,
        "tolerance": report.tolerance,
    })
}

/// Runs `plan` and writes its outputs into `out`, which must exist.
pub fn execute(plan: &Plan, out: &Path) -> Result<Outcome, CliError> {
    match plan.kind {
        Kind::Euclidean | Kind::Newton | Kind::Sgd => run_euclidean(plan, out),
        Kind::FokkerPlanck => run_fokker_planck(plan, out),
        Kind::Product => run_product(plan, out),
        Kind::Verify => crate::verify::run_suite(),
    }
}

fn run_euclidean(plan: &Plan, out: &Path) -> Result<Outcome, CliError> {
    let f = plan.objective.as_deref().expect("resolved objective");
    let x0 = plan.start.as_deref().expect("resolved start");
    let weighting = plan.weighting.as_ref().expect("resolved weighting");
    let (traj, realized) = flow_for(f, x0, plan.t_final, plan.dt, weighting)?;
    let running = running_action_series(&traj, f, &realized)?;
    let grad_sq = gradient_norm_sq_series(&traj, f, &realized)?;
    let n = traj.dimension();

    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=n).map(|i| format!("u_{i}")));
    header.extend(columns(&["f", "grad_norm_sq", "running_action"]));
    // The control on [tₖ, tₖ₊₁] sits on row k; the final row has none.
    let rows = (0..traj.times().len()).map(|k| {
        let mut row = vec![traj.times()[k]];
        row.extend_from_slice(&traj.states()[k]);
        match traj.controls().get(k) {
            Some(u) => row.extend_from_slice(u),
            None => row.extend(std::iter::repeat_n(f64::NAN, n)),
        }
        row.extend([f.value(&traj.states()[k]), grad_sq[k], running[k]]);
        row
    });
    write_csv(&out.join("trajectory.csv"), &header, rows)?;

    let cost = action_euclidean(&traj, f, &realized, Some(DEFAULT_FEASIBILITY_THRESHOLD))?;
    let f0 = f.value(x0);
    let diss = dissipation_check_euclidean(&traj, f, &realized)?;
    let p = plan.perturbation.unwrap_or(DEFAULT_PERTURBATION);
    let gap = optimality_gap(f, x0, plan.t_final, plan.dt, weighting, p.count, p.magnitude, plan.seed)?;
    write_json(&out.join("gap.json"), &gap_json(&gap))?;

    let mut checks = vec![Check::at_most("optimal_cost_identity", (cost.total - f0).abs(), 1e-4)];
    checks.push(match &realized {
        // Forward differences: per-step decrease within 10·dt².
        Weighting::Projection(_) => Check::at_most("dissipation_constant", diss.constant, 10.0),
        _ => Check::at_most("dissipation", diss.max_mismatch, 1e-4),
    });
    checks.push(Check::at_least_minus("perturbation_gap", gap.gap, gap.tolerance.max(1e-4)));

    let masks = match &realized {
        Weighting::Projection(p) => json!(p.realized_masks()),
        _ => Value::Null,
    };
    let summary = json!({
        "weighting": realized.name(),
        "action": cost,
        "f_initial": f0,
        "identity_residual": cost.total - f0,
        "feasibility_residual": traj.feasibility_residual(),
        "dissipation_max_mismatch": diss.max_mismatch,
        "dissipation_constant": diss.constant,
        "final_state": traj.final_state(),
        "gap": gap.gap,
        "masks": masks,
    });
    Ok(Outcome {
        kind: plan.kind,
        files: vec!["trajectory.csv".into(), "gap.json".into()],
        checks,
        summary,
    })
}

fn run_fokker_planck(plan: &Plan, out: &Path) -> Result<Outcome, CliError> {
    let rho0 = plan.density.as_ref().expect("resolved density");
    let pot = plan.potential.as_ref().expect("resolved potential");
    let run = fokker_planck_flow(rho0, pot, plan.t_final, plan.dt)?;
    let r = &run.report;
    let mut files = vec!["report.csv".to_string()];
    let rows = (0..r.times.len()).map(|k| {
        vec![
            r.times[k],
            r.divergence_series[k],
            r.fisher_series[k],
            r.mass_series[k],
            r.action_running[k],
        ]
    });
    write_csv(
        &out.join("report.csv"),
        &columns(&["t", "divergence", "fisher", "mass", "running_action"]),
        rows,
    )?;
    let snaps = snapshot_dir(out)?;
    for (k, s) in run.snapshots.iter().enumerate() {
        let stem = format!("{k:03}");
        write_density(&snaps, &stem, s).map_err(|source| CliError::Io {
            path: snaps.join(&stem),
            source,
        })?;
        files.push(format!("snapshots/{stem}.csv"));
    }

    let d0 = relative_entropy(rho0, &run.reference)?;
    let cost = r.action();
    let diss = dissipation_check_fp(r, (0.1 * plan.t_final, 0.9 * plan.t_final))?;
    let velocities = run.feedback_velocities()?;
    let mut virial: f64 = 0.0;
    for (s, v) in run.snapshots.iter().zip(&velocities) {
        let (lhs, rhs) = virial_check(s, v, &run.reference)?;
        if rhs > 0.0 {
            virial = virial.max((lhs - rhs).abs() / rhs);
        }
    }
    let mass_drift = r.mass_series.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let mut checks = vec![
        Check::at_most("fluid_action_identity", (cost.total - d0).abs(), 2e-2),
        Check::at_most("fisher_dissipation", diss.max_mismatch, 5e-3),
        Check::at_most("virial", virial, 1e-10),
        Check::at_most("mass_drift", mass_drift, 1e-10),
    ];
    let mut gap_value = Value::Null;
    if let Some(p) = plan.perturbation {
        let gap = optimality_gap_fp(rho0, pot, plan.t_final, plan.dt, p.count, p.magnitude, plan.seed)?;
        write_json(&out.join("gap.json"), &gap_json(&gap))?;
        files.push("gap.json".into());
        checks.push(Check::at_least_minus("perturbation_gap", gap.gap, gap.tolerance));
        gap_value = json!(gap.gap);
    }
    let last = run.snapshots.last().expect("at least one snapshot");
    let summary = json!({
        "terminal_mean": last.mean(),
        "terminal_variance": last.variance(),
        "initial_divergence": d0,
        "action": cost,
        "action_residual": cost.total - d0,
        "dissipation_max_mismatch": diss.max_mismatch,
        "virial_max_relative": virial,
        "mass_drift": mass_drift,
        "steps": r.steps,
        "stability_ratio": r.stability_ratio,
        "gap": gap_value,
    });
    Ok(Outcome {
        kind: plan.kind,
        files,
        checks,
        summary,
    })
}

fn run_product(plan: &Plan, out: &Path) -> Result<Outcome, CliError> {
    let state0 = ProductState::new(
        plan.density.clone().expect("resolved density"),
        plan.partner.clone().expect("resolved partner"),
    )?;
    let run = product_flow_run(&state0, plan.t_final, plan.dt)?;
    let r = &run.report;
    let mut files = vec!["report.csv".to_string()];
    let rows = (0..r.times.len()).map(|k| {
        vec![
            r.times[k],
            r.divergence_series[k],
            r.reff_rate_series[k],
            r.sum_drift_series[k],
            r.mass_tilde_series[k],
            r.mass_series[k],
            r.action_running[k],
        ]
    });
    write_csv(
        &out.join("report.csv"),
        &columns(&["t", "divergence", "reff_rate", "sum_drift", "mass_tilde", "mass", "running_action"]),
        rows,
    )?;
    let snaps = snapshot_dir(out)?;
    for (k, s) in run.snapshots.iter().enumerate() {
        for (suffix, d) in [("tilde", s.tilde()), ("rho", s.rho())] {
            let stem = format!("{k:03}_{suffix}");
            write_density(&snaps, &stem, d).map_err(|source| CliError::Io {
                path: snaps.join(&stem),
                source,
            })?;
            files.push(format!("snapshots/{stem}.csv"));
        }
    }

    let d0 = state0.divergence()?;
    let cost = r.action();
    let sum_drift = r.sum_drift_series.iter().copied().fold(0.0, f64::max);
    let increase = r
        .divergence_series
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let bary = state0.barycenter()?;
    let last = run.snapshots.last().expect("at least one snapshot");
    let limit_distance = last.tilde().max_abs_diff(&bary).max(last.rho().max_abs_diff(&bary));
    let reff0 = reff_rate(&state0)?;
    let mut checks = vec![
        Check::at_most("sum_drift", sum_drift, 1e-12),
        Check::at_most("antisymmetry", r.max_antisymmetry, 1e-13),
        Check::at_most("divergence_increase", increase, LYAPUNOV_SLACK),
        Check::at_most("product_action_identity", (cost.total - d0).abs(), 2e-2),
        Check::at_most("reff_split_mismatch", reff0.relative_mismatch(), 1e-6),
    ];
    if r.fisher_stop {
        checks.push(Check::at_most("barycenter_limit", limit_distance, 5e-3));
    }
    let mut gap_value = Value::Null;
    if let Some(p) = plan.perturbation {
        let gap = optimality_gap_product(&state0, plan.t_final, plan.dt, p.count, p.magnitude, plan.seed)?;
        write_json(&out.join("gap.json"), &gap_json(&gap))?;
        files.push("gap.json".into());
        checks.push(Check::at_least_minus("perturbation_gap", gap.gap, gap.tolerance));
        gap_value = json!(gap.gap);
    }
    let summary = json!({
        "initial_divergence": d0,
        "action": cost,
        "action_residual": cost.total - d0,
        "limit_distance": limit_distance,
        "fisher_stop": r.fisher_stop,
        "final_time": r.final_time(),
        "snapshot_times": run.snapshot_times,
        "max_sum_drift": sum_drift,
        "max_antisymmetry": r.max_antisymmetry,
        "max_divergence_increase": increase,
        "accepted_steps": r.accepted_steps,
        "rejected_steps": r.rejected_steps,
        "gap": gap_value,
    });
    Ok(Outcome {
        kind: plan.kind,
        files,
        checks,
        summary,
    })
}
