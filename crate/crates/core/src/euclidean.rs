//! Gradient, Newton and projected gradient flows in ℝⁿ, together with the
//! control action whose minimizer each flow is.
//!
//! Controls are stored as the exact difference quotients of consecutive
//! states, so integrator output is feasible for `ẋ = u` by construction and
//! the action can be evaluated without a constraint error.
//!
//! The running cost is integrated per step with the control held constant and
//! the gradient term averaged over both endpoints. For quadratic objectives
//! this makes `J − f(x₀)` a sum of nonnegative squares, so the discrete
//! action reproduces the continuous optimality statement exactly rather than
//! to first order.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FlowError, Result};
use crate::objectives::Objective;
use crate::perturb::{sample_rng, standard_normal_vec};
use crate::{AccountedCost, DissipationPoint, DissipationSeries, GapReport};

/// Smallest Hessian eigenvalue accepted as positive definite.
pub const HESSIAN_EIGEN_THRESHOLD: f64 = 1e-12;

/// Default bound on the feasibility residual before an action is evaluated.
pub const DEFAULT_FEASIBILITY_THRESHOLD: f64 = 1e-8;

/// Guards `floor(t / interval)` against round-off at epoch boundaries.
const EPOCH_EPS: f64 = 1e-9;

/// A time-gridded path with piecewise-constant controls.
///
/// There is one control per step, so `controls.len() + 1 == states.len()`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>, controls: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || states.len() != times.len() || controls.len() + 1 != times.len() {
            return Err(FlowError::InvalidParameter {
                name: "trajectory",
                reason: format!(
                    "{} times, {} states and {} controls do not line up",
                    times.len(),
                    states.len(),
                    controls.len()
                ),
            });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FlowError::InvalidParameter {
                name: "trajectory",
                reason: "times must be strictly increasing".into(),
            });
        }
        let n = states[0].len();
        for v in states.iter().chain(&controls) {
            if v.len() != n {
                return Err(FlowError::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        Ok(Self {
            times,
            states,
            controls,
        })
    }

    /// Builds a trajectory from states alone, with controls set to the
    /// difference quotients.
    fn from_states(times: Vec<f64>, states: Vec<Vec<f64>>) -> Self {
        let controls = (0..states.len() - 1)
            .map(|i| {
                let h = times[i + 1] - times[i];
                states[i + 1]
                    .iter()
                    .zip(&states[i])
                    .map(|(b, a)| (b - a) / h)
                    .collect()
            })
            .collect();
        Self {
            times,
            states,
            controls,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn dimension(&self) -> usize {
        self.states[0].len()
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn step_size(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least two states")
    }

    /// `max_i ‖x(tᵢ₊₁) − x(tᵢ) − u(tᵢ)Δtᵢ‖`.
    pub fn feasibility_residual(&self) -> f64 {
        (0..self.steps())
            .map(|i| {
                let h = self.step_size(i);
                self.states[i + 1]
                    .iter()
                    .zip(&self.states[i])
                    .zip(&self.controls[i])
                    .map(|((b, a), u)| (b - a - u * h).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Random diagonal 0/1 masks with exactly `batch_size` ones, one per epoch of
/// length `resample_interval`.
///
/// Masks are drawn from a single seeded stream in epoch order, so the
/// sequence does not depend on how far it has been realized.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectionProcess {
    dimension: usize,
    batch_size: usize,
    resample_interval: f64,
    seed: u64,
    realized_masks: Vec<Vec<bool>>,
    #[serde(skip)]
    rng: ChaCha8Rng,
}

impl PartialEq for ProjectionProcess {
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension
            && self.batch_size == other.batch_size
            && self.resample_interval == other.resample_interval
            && self.seed == other.seed
            && self.realized_masks == other.realized_masks
    }
}

impl ProjectionProcess {
    pub fn new(dimension: usize, batch_size: usize, resample_interval: f64, seed: u64) -> Result<Self> {
        if dimension == 0 || batch_size == 0 || batch_size > dimension {
            return Err(FlowError::InvalidParameter {
                name: "batch_size",
                reason: format!("must lie in [1, {dimension}], got {batch_size}"),
            });
        }
        if !(resample_interval.is_finite() && resample_interval > 0.0) {
            return Err(FlowError::InvalidParameter {
                name: "resample_interval",
                reason: format!("must be positive, got {resample_interval}"),
            });
        }
        Ok(Self {
            dimension,
            batch_size,
            resample_interval,
            seed,
            realized_masks: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn resample_interval(&self) -> f64 {
        self.resample_interval
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn realized_masks(&self) -> &[Vec<bool>] {
        &self.realized_masks
    }

    pub fn epoch_of(&self, t: f64) -> usize {
        (t / self.resample_interval + EPOCH_EPS).floor().max(0.0) as usize
    }

    /// Draws masks until the epoch containing `t` is available.
    pub fn realize_until(&mut self, t: f64) {
        let epoch = self.epoch_of(t);
        while self.realized_masks.len() <= epoch {
            let mut mask = vec![false; self.dimension];
            for j in rand::seq::index::sample(&mut self.rng, self.dimension, self.batch_size) {
                mask[j] = true;
            }
            self.realized_masks.push(mask);
        }
    }

    /// The mask in force at time `t`; it must already be realized.
    pub fn mask_at(&self, t: f64) -> &[bool] {
        &self.realized_masks[self.epoch_of(t)]
    }
}

/// The metric used in the action and dissipation identities.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Identity,
    /// Gradient term weighted by `H⁻¹`, control term by `H`.
    InverseHessian,
    Projection(ProjectionProcess),
}

impl Weighting {
    pub fn name(&self) -> &'static str {
        match self {
            Weighting::Identity => "identity",
            Weighting::InverseHessian => "inverse_hessian",
            Weighting::Projection(_) => "projection",
        }
    }
}

fn check_horizon(t_final: f64, dt: f64) -> Result<usize> {
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(FlowError::InvalidParameter {
            name: "t_final",
            reason: format!("must be positive, got {t_final}"),
        });
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(FlowError::InvalidParameter {
            name: "dt",
            reason: format!("must be positive, got {dt}"),
        });
    }
    if dt > t_final {
        return Err(FlowError::InvalidParameter {
            name: "dt",
            reason: format!("dt = {dt} exceeds T = {t_final}"),
        });
    }
    Ok(((t_final / dt) - 1e-9).ceil().max(1.0) as usize)
}

/// `tᵢ = i·dt` with the last node clamped to `T`.
fn time_grid(t_final: f64, dt: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| if i == steps { t_final } else { i as f64 * dt })
        .collect()
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::NonFinite { step })
    }
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_start(f: &dyn Objective, x0: &[f64]) -> Result<()> {
    if x0.len() != f.dimension() {
        return Err(FlowError::DimensionMismatch {
            expected: f.dimension(),
            got: x0.len(),
        });
    }
    check_finite(x0, 0)
}

fn rk4_flow(
    x0: &[f64],
    t_final: f64,
    dt: f64,
    rhs: impl Fn(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<Trajectory> {
    let steps = check_horizon(t_final, dt)?;
    let times = time_grid(t_final, dt, steps);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    for i in 0..steps {
        let h = times[i + 1] - times[i];
        let x = &states[i];
        let k1 = rhs(x, i)?;
        let k2 = rhs(&axpy(x, 0.5 * h, &k1), i)?;
        let k3 = rhs(&axpy(x, 0.5 * h, &k2), i)?;
        let k4 = rhs(&axpy(x, h, &k3), i)?;
        let next: Vec<f64> = (0..x.len())
            .map(|j| x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect();
        check_finite(&next, i + 1)?;
        states.push(next);
    }
    Ok(Trajectory::from_states(times, states))
}

/// RK4 integration of `ẋ = −∇f(x)`.
pub fn gradient_flow(f: &dyn Objective, x0: &[f64], t_final: f64, dt: f64) -> Result<Trajectory> {
    check_start(f, x0)?;
    rk4_flow(x0, t_final, dt, |x, _| {
        Ok(f.gradient(x).into_iter().map(|g| -g).collect())
    })
}

/// Checked positive-definite Hessian at `x`.
fn spd_hessian(f: &dyn Objective, x: &[f64], step: usize) -> Result<DMatrix<f64>> {
    let h = f.hessian(x).ok_or(FlowError::MissingHessian)?;
    let min_eigenvalue = h.clone().symmetric_eigen().eigenvalues.min();
    if !(min_eigenvalue > HESSIAN_EIGEN_THRESHOLD) {
        return Err(FlowError::HessianNotPositiveDefinite {
            step,
            location: x.to_vec(),
            min_eigenvalue,
        });
    }
    Ok(h)
}

/// `H⁻¹ g` through a Cholesky factorization of a checked Hessian.
fn newton_direction(f: &dyn Objective, x: &[f64], step: usize) -> Result<Vec<f64>> {
    let h = spd_hessian(f, x, step)?;
    let chol = h.cholesky().ok_or_else(|| FlowError::HessianNotPositiveDefinite {
        step,
        location: x.to_vec(),
        min_eigenvalue: 0.0,
    })?;
    Ok(chol
        .solve(&DVector::from_vec(f.gradient(x)))
        .as_slice()
        .to_vec())
}

/// RK4 integration of the Newton flow `ẋ = −H_f(x)⁻¹∇f(x)`.
pub fn newton_flow(f: &dyn Objective, x0: &[f64], t_final: f64, dt: f64) -> Result<Trajectory> {
    check_start(f, x0)?;
    rk4_flow(x0, t_final, dt, |x, step| {
        Ok(newton_direction(f, x, step)?
            .into_iter()
            .map(|d| -d)
            .collect())
    })
}

fn euler_flow(
    f: &dyn Objective,
    x0: &[f64],
    t_final: f64,
    dt: f64,
    mut mask_for: impl FnMut(f64) -> Option<Vec<bool>>,
) -> Result<Trajectory> {
    check_start(f, x0)?;
    let steps = check_horizon(t_final, dt)?;
    let times = time_grid(t_final, dt, steps);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    for i in 0..steps {
        let h = times[i + 1] - times[i];
        let mut g = f.gradient(&states[i]);
        if let Some(mask) = mask_for(times[i]) {
            for (gj, keep) in g.iter_mut().zip(mask) {
                if !keep {
                    *gj = 0.0;
                }
            }
        }
        let next: Vec<f64> = states[i].iter().zip(&g).map(|(x, g)| x - h * g).collect();
        check_finite(&next, i + 1)?;
        states.push(next);
    }
    Ok(Trajectory::from_states(times, states))
}

/// Forward-Euler integration of `ẋ = −∇f(x)`; the reference for the
/// full-batch projected flow.
pub fn euler_gradient_flow(f: &dyn Objective, x0: &[f64], t_final: f64, dt: f64) -> Result<Trajectory> {
    euler_flow(f, x0, t_final, dt, |_| None)
}

/// Forward-Euler integration of `ẋ = −Π(t)∇f(x)`. Masks are realized into
/// `proj` as the integration reaches each epoch.
pub fn sgd_flow(
    f: &dyn Objective,
    x0: &[f64],
    t_final: f64,
    dt: f64,
    proj: &mut ProjectionProcess,
) -> Result<Trajectory> {
    if proj.dimension() != f.dimension() {
        return Err(FlowError::DimensionMismatch {
            expected: f.dimension(),
            got: proj.dimension(),
        });
    }
    if proj.resample_interval() < dt {
        return Err(FlowError::InvalidParameter {
            name: "resample_interval",
            reason: format!(
                "interval {} is shorter than dt = {dt}",
                proj.resample_interval()
            ),
        });
    }
    proj.realize_until(t_final);
    let masks = proj.clone();
    euler_flow(f, x0, t_final, dt, |t| Some(masks.mask_at(t).to_vec()))
}

/// Runs the flow whose action is measured by `weighting`.
pub fn flow_for(
    f: &dyn Objective,
    x0: &[f64],
    t_final: f64,
    dt: f64,
    weighting: &Weighting,
) -> Result<(Trajectory, Weighting)> {
    match weighting {
        Weighting::Identity => Ok((gradient_flow(f, x0, t_final, dt)?, Weighting::Identity)),
        Weighting::InverseHessian => Ok((newton_flow(f, x0, t_final, dt)?, Weighting::InverseHessian)),
        Weighting::Projection(p) => {
            let mut p = p.clone();
            let traj = sgd_flow(f, x0, t_final, dt, &mut p)?;
            Ok((traj, Weighting::Projection(p)))
        }
    }
}

/// Per-node squared norms `(‖∇f‖²_{gradient metric}, …)` evaluated by the
/// weighting, plus the control norm on each step.
struct Metric<'a> {
    f: &'a dyn Objective,
    weighting: &'a Weighting,
}

impl Metric<'_> {
    fn masked(mask: &[bool], v: &[f64]) -> f64 {
        v.iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(x, _)| x * x)
            .sum()
    }

    /// `‖∇f(x)‖²` in the gradient metric; `t` selects the mask for the
    /// projection weighting.
    fn gradient_sq(&self, x: &[f64], t: f64, step: usize) -> Result<f64> {
        let g = self.f.gradient(x);
        match self.weighting {
            Weighting::Identity => Ok(dot(&g, &g)),
            Weighting::InverseHessian => Ok(dot(&g, &newton_direction(self.f, x, step)?)),
            Weighting::Projection(p) => Ok(Self::masked(p.mask_at(t), &g)),
        }
    }

    /// `‖u‖²` in the control metric at state `x`.
    fn control_sq(&self, u: &[f64], x: &[f64], t: f64, step: usize) -> Result<f64> {
        match self.weighting {
            Weighting::Identity => Ok(dot(u, u)),
            Weighting::InverseHessian => {
                let h = spd_hessian(self.f, x, step)?;
                let u = DVector::from_column_slice(u);
                Ok(u.dot(&(h * &u)))
            }
            Weighting::Projection(p) => Ok(Self::masked(p.mask_at(t), u)),
        }
    }
}

fn ensure_masks(traj: &Trajectory, weighting: &Weighting) -> Result<()> {
    if let Weighting::Projection(p) = weighting {
        if p.dimension() != traj.dimension() {
            return Err(FlowError::DimensionMismatch {
                expected: traj.dimension(),
                got: p.dimension(),
            });
        }
        let needed = p.epoch_of(traj.times[traj.steps() - 1]) + 1;
        if p.realized_masks().len() < needed {
            return Err(FlowError::InvalidParameter {
                name: "projection",
                reason: format!(
                    "{} masks realized, trajectory needs {needed}",
                    p.realized_masks().len()
                ),
            });
        }
    }
    Ok(())
}

/// Running cost per step, running action up to each node, and the total.
///
/// On step `i` the control term is `½‖uᵢ‖²_W Δt` and the gradient term is the
/// trapezoid average of `½‖∇f‖²_W` over the two endpoints, both under the
/// metric in force on that step.
pub fn running_action_series(traj: &Trajectory, f: &dyn Objective, weighting: &Weighting) -> Result<Vec<f64>> {
    ensure_masks(traj, weighting)?;
    if weighting == &Weighting::InverseHessian && f.hessian(&traj.states[0]).is_none() {
        return Err(FlowError::MissingHessian);
    }
    let metric = Metric { f, weighting };
    let mut acc = 0.0;
    let mut series = Vec::with_capacity(traj.states.len());
    series.push(0.0);
    for i in 0..traj.steps() {
        let h = traj.step_size(i);
        let t = traj.times[i];
        let left = metric.gradient_sq(&traj.states[i], t, i)?;
        let right = metric.gradient_sq(&traj.states[i + 1], t, i + 1)?;
        let control = metric.control_sq(&traj.controls[i], &traj.states[i], t, i)?;
        acc += h * (0.25 * (left + right) + 0.5 * control);
        series.push(acc);
    }
    Ok(series)
}

/// `‖∇f(xᵢ)‖²_W` at every node of `traj`. The final node uses the last
/// step's mask under projection.
pub fn gradient_norm_sq_series(traj: &Trajectory, f: &dyn Objective, weighting: &Weighting) -> Result<Vec<f64>> {
    ensure_masks(traj, weighting)?;
    let metric = Metric { f, weighting };
    let last_t = traj.times[traj.steps() - 1];
    traj.states
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let t = if i == traj.steps() { last_t } else { traj.times[i] };
            metric.gradient_sq(x, t, i)
        })
        .collect()
}

/// Action `J(x, u) = ∫ ½‖∇f‖²_W + ½‖u‖²_W dt + f(x(T))`.
///
/// `feasibility_threshold = None` waives the feasibility check.
pub fn action_euclidean(
    traj: &Trajectory,
    f: &dyn Objective,
    weighting: &Weighting,
    feasibility_threshold: Option<f64>,
) -> Result<AccountedCost> {
    if let Some(threshold) = feasibility_threshold {
        let residual = traj.feasibility_residual();
        if !(residual <= threshold) {
            return Err(FlowError::Infeasible {
                residual,
                threshold,
            });
        }
    }
    let running = *running_action_series(traj, f, weighting)?
        .last()
        .expect("series is nonempty");
    Ok(AccountedCost::new(running, f.value(traj.final_state())))
}

/// `Λ^S = ∫ u·∇S dt − S(x(T)) + S(x(0))`, with `∇S` averaged over each step's
/// endpoints. Zero to roundoff for quadratic `S` on feasible trajectories.
pub fn lagrange_functional(traj: &Trajectory, s: &dyn Objective) -> Result<f64> {
    if s.dimension() != traj.dimension() {
        return Err(FlowError::DimensionMismatch {
            expected: traj.dimension(),
            got: s.dimension(),
        });
    }
    let mut integral = 0.0;
    let mut g_left = s.gradient(&traj.states[0]);
    for i in 0..traj.steps() {
        let g_right = s.gradient(&traj.states[i + 1]);
        let avg: Vec<f64> = g_left.iter().zip(&g_right).map(|(a, b)| 0.5 * (a + b)).collect();
        integral += traj.step_size(i) * dot(&traj.controls[i], &avg);
        g_left = g_right;
    }
    Ok(integral - s.value(traj.final_state()) + s.value(&traj.states[0]))
}

/// Compares the finite-difference rate of `f` along `traj` with
/// `−‖∇f‖²_W`.
///
/// Central differences are used for the identity and inverse-Hessian
/// weightings (one-sided second order at the ends) and the mismatch is taken
/// over interior nodes. Under projection the mask jumps between epochs, so
/// `f` is only piecewise smooth; the forward difference of each step is
/// compared with the rate at its left node.
pub fn dissipation_check_euclidean(
    traj: &Trajectory,
    f: &dyn Objective,
    weighting: &Weighting,
) -> Result<DissipationSeries> {
    ensure_masks(traj, weighting)?;
    let metric = Metric { f, weighting };
    let values: Vec<f64> = traj.states.iter().map(|x| f.value(x)).collect();
    let n = values.len();
    let mut points = Vec::with_capacity(n);
    let mut max_mismatch: f64 = 0.0;
    let mut max_dt: f64 = 0.0;
    if let Weighting::Projection(_) = weighting {
        for i in 0..traj.steps() {
            let h = traj.step_size(i);
            max_dt = max_dt.max(h);
            let t = traj.times[i];
            let lhs = (values[i + 1] - values[i]) / h;
            let rhs = -metric.gradient_sq(&traj.states[i], t, i)?;
            max_mismatch = max_mismatch.max((lhs - rhs).abs());
            points.push(DissipationPoint { t, lhs, rhs });
        }
        return Ok(DissipationSeries {
            points,
            max_mismatch,
            constant: max_mismatch / max_dt,
        });
    }
    if n < 3 {
        return Err(FlowError::InvalidParameter {
            name: "trajectory",
            reason: "central differences need at least three nodes".into(),
        });
    }
    let times = &traj.times;
    for i in 0..n {
        let lhs = if i == 0 {
            let h = times[1] - times[0];
            (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * h)
        } else if i == n - 1 {
            let h = times[n - 1] - times[n - 2];
            (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * h)
        } else {
            (values[i + 1] - values[i - 1]) / (times[i + 1] - times[i - 1])
        };
        let rhs = -metric.gradient_sq(&traj.states[i], times[i], i)?;
        if i > 0 && i < n - 1 {
            max_mismatch = max_mismatch.max((lhs - rhs).abs());
            max_dt = max_dt.max(times[i + 1] - times[i]);
        }
        points.push(DissipationPoint { t: times[i], lhs, rhs });
    }
    Ok(DissipationSeries {
        points,
        max_mismatch,
        constant: max_mismatch / (max_dt * max_dt),
    })
}

/// Integrates `xᵢ₊₁ = xᵢ + Π uᵢ Δtᵢ` from `x0` (Π = I unless projecting) and
/// records the effective controls. `None` when the state blows up.
fn reintegrate(
    x0: &[f64],
    times: &[f64],
    controls: &[Vec<f64>],
    weighting: &Weighting,
) -> Option<Trajectory> {
    let mut states = Vec::with_capacity(times.len());
    let mut effective = Vec::with_capacity(controls.len());
    states.push(x0.to_vec());
    for (i, u) in controls.iter().enumerate() {
        let u: Vec<f64> = match weighting {
            Weighting::Projection(p) => u
                .iter()
                .zip(p.mask_at(times[i]))
                .map(|(v, m)| if *m { *v } else { 0.0 })
                .collect(),
            _ => u.clone(),
        };
        let next = axpy(&states[i], times[i + 1] - times[i], &u);
        if next.iter().any(|v| !v.is_finite()) {
            return None;
        }
        states.push(next);
        effective.push(u);
    }
    Some(Trajectory {
        times: times.to_vec(),
        states,
        controls: effective,
    })
}

/// Perturbation study around the optimal flow for `weighting`.
///
/// Sample `k` adds `ε·b(t)` to the optimal controls, with
/// `b(t) = sin(πt/T)·g` for a seeded normal vector `g` scaled to unit
/// `L²[0, T]` norm, evaluated at step midpoints. Every total, optimal
/// included, is computed on a trajectory re-integrated from its controls, so
/// `ε = 0` gives a gap of exactly zero. Samples that blow up are recorded as
/// `+∞` and flagged.
#[allow(clippy::too_many_arguments)]
pub fn optimality_gap(
    f: &dyn Objective,
    x0: &[f64],
    t_final: f64,
    dt: f64,
    weighting: &Weighting,
    count: usize,
    magnitude: f64,
    seed: u64,
) -> Result<GapReport> {
    let (flow, weighting) = flow_for(f, x0, t_final, dt, weighting)?;
    let times = flow.times.clone();
    let optimal = reintegrate(x0, &times, &flow.controls, &weighting)
        .ok_or(FlowError::NonFinite { step: 0 })?;
    let optimal_total = action_euclidean(&optimal, f, &weighting, None)?.total;

    let n = f.dimension();
    let results: Vec<Result<Option<f64>>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = sample_rng(seed, k as u64);
            let g = standard_normal_vec(&mut rng, n);
            let norm = dot(&g, &g).sqrt();
            let scale = if norm > 0.0 {
                magnitude * (2.0 / t_final).sqrt() / norm
            } else {
                0.0
            };
            let controls: Vec<Vec<f64>> = flow
                .controls
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let tm = 0.5 * (times[i] + times[i + 1]);
                    let bump = (std::f64::consts::PI * tm / t_final).sin() * scale;
                    u.iter().zip(&g).map(|(u, g)| u + bump * g).collect()
                })
                .collect();
            match reintegrate(x0, &times, &controls, &weighting) {
                Some(traj) => {
                    let total = action_euclidean(&traj, f, &weighting, None)?.total;
                    Ok(total.is_finite().then_some(total))
                }
                None => Ok(None),
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(count);
    let mut flagged = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r? {
            Some(total) => samples.push(total),
            None => {
                samples.push(f64::INFINITY);
                flagged.push(k);
            }
        }
    }
    let tolerance = 1e-6 + 10.0 * dt * dt * t_final;
    Ok(GapReport::from_samples(optimal_total, samples, flagged, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{make_quadratic, DoubleWell, Linear, Quadratic};

    fn diag(d: &[f64]) -> Quadratic {
        Quadratic::diagonal(d).unwrap()
    }

    #[test]
    fn gradient_flow_matches_exponential_decay() {
        let traj = gradient_flow(&diag(&[1.0, 1.0]), &[1.0, 0.0], 1.0, 1e-3).unwrap();
        let x = traj.final_state();
        assert!((x[0] - (-1f64).exp()).abs() < 1e-6 && x[1].abs() < 1e-12);
        assert_eq!(traj.times().len(), 1001);
        assert_eq!(*traj.times().last().unwrap(), 1.0);

        let traj = gradient_flow(&diag(&[1.0, 4.0]), &[1.0, 1.0], 1.0, 1e-3).unwrap();
        let x = traj.final_state();
        assert!((x[0] - (-1f64).exp()).abs() < 1e-6);
        assert!((x[1] - (-4f64).exp()).abs() < 1e-6);
        assert!(traj.feasibility_residual() < 1e-14);
    }

    #[test]
    fn stationary_start_stays_put() {
        let q = make_quadratic(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])), &[2.0, 0.0]).unwrap();
        for traj in [
            gradient_flow(&q, &[2.0, 0.0], 1.0, 0.01).unwrap(),
            newton_flow(&q, &[2.0, 0.0], 1.0, 0.01).unwrap(),
        ] {
            assert!(traj.states().iter().all(|x| x == &vec![2.0, 0.0]));
            assert!(traj.controls().iter().all(|u| u == &vec![0.0, 0.0]));
            let cost = action_euclidean(&traj, &q, &Weighting::Identity, Some(1e-8)).unwrap();
            assert_eq!(cost.total, 0.0);
        }
    }

    #[test]
    fn rejects_bad_horizons() {
        let q = diag(&[1.0]);
        assert!(gradient_flow(&q, &[1.0], 1.0, 2.0).is_err());
        assert!(gradient_flow(&q, &[1.0], 1.0, 0.0).is_err());
        assert!(gradient_flow(&q, &[1.0, 2.0], 1.0, 0.1).is_err());
    }

    #[test]
    fn nonfinite_state_reports_step() {
        #[derive(Debug)]
        struct Explosive;
        impl Objective for Explosive {
            fn dimension(&self) -> usize {
                1
            }
            fn value(&self, x: &[f64]) -> f64 {
                -x[0].powi(4)
            }
            fn gradient(&self, x: &[f64]) -> Vec<f64> {
                vec![-4.0 * x[0].powi(3)]
            }
        }
        match gradient_flow(&Explosive, &[10.0], 10.0, 0.1) {
            Err(FlowError::NonFinite { step }) => assert!(step > 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn newton_flow_examples() {
        let q = diag(&[1.0, 100.0]);
        let traj = newton_flow(&q, &[1.0, 1.0], 1.0, 1e-3).unwrap();
        let e = (-1f64).exp();
        assert!((traj.final_state()[0] - e).abs() < 1e-6);
        assert!((traj.final_state()[1] - e).abs() < 1e-6);

        let iso = diag(&[1.0, 1.0]);
        let a = newton_flow(&iso, &[1.0, -0.5], 1.0, 1e-2).unwrap();
        let b = gradient_flow(&iso, &[1.0, -0.5], 1.0, 1e-2).unwrap();
        for (x, y) in a.states().iter().zip(b.states()) {
            assert!((x[0] - y[0]).abs() < 1e-10 && (x[1] - y[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn newton_flow_rejects_indefinite_hessian() {
        match newton_flow(&DoubleWell, &[0.1], 1.0, 0.01) {
            Err(FlowError::HessianNotPositiveDefinite { step, location, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(location, vec![0.1]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let line = Linear {
            slope: vec![1.0],
            offset: 0.0,
        };
        assert!(newton_flow(&line, &[0.0], 1.0, 0.1).is_err());
    }

    #[test]
    fn f_is_monotone_along_flows() {
        let q = make_quadratic(
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            &[0.5, -1.0],
        )
        .unwrap();
        for (f, x0) in [(&q as &dyn Objective, vec![2.0, 2.0]), (&DoubleWell, vec![2.0])] {
            let traj = gradient_flow(f, &x0, 3.0, 1e-2).unwrap();
            for w in traj.states().windows(2) {
                assert!(f.value(&w[1]) <= f.value(&w[0]));
            }
        }
        let traj = newton_flow(&q, &[2.0, 2.0], 3.0, 1e-2).unwrap();
        for w in traj.states().windows(2) {
            assert!(q.value(&w[1]) <= q.value(&w[0]));
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let q = diag(&[1.0, 4.0]);
        let exact = [(-1f64).exp(), (-4f64).exp()];
        let err = |dt: f64| {
            let x = gradient_flow(&q, &[1.0, 1.0], 1.0, dt).unwrap();
            let x = x.final_state();
            ((x[0] - exact[0]).powi(2) + (x[1] - exact[1]).powi(2)).sqrt()
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn euler_action_converges_at_first_order() {
        let q = diag(&[1.0, 4.0]);
        let total = |dt: f64| {
            let (traj, w) = flow_for(
                &q,
                &[1.0, 1.0],
                2.0,
                dt,
                &Weighting::Projection(ProjectionProcess::new(2, 2, 0.5, 1).unwrap()),
            )
            .unwrap();
            action_euclidean(&traj, &q, &w, Some(1e-8)).unwrap().total
        };
        let (a, b, c) = (total(0.04), total(0.02), total(0.01));
        let ratio = (a - b) / (b - c);
        assert!(ratio > 1.5 && ratio < 5.0, "ratio {ratio}");
    }

    #[test]
    fn sgd_full_batch_is_euler_bitwise() {
        let q = make_quadratic(
            DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]),
            &[0.3, -0.2, 1.0],
        )
        .unwrap();
        let mut proj = ProjectionProcess::new(3, 3, 0.1, 9).unwrap();
        let a = sgd_flow(&q, &[1.0, 2.0, 3.0], 2.0, 1e-3, &mut proj).unwrap();
        let b = euler_gradient_flow(&q, &[1.0, 2.0, 3.0], 2.0, 1e-3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_masks_are_reproducible_and_sized() {
        let q = diag(&[1.0; 4]);
        let run = || {
            let mut proj = ProjectionProcess::new(4, 2, 0.05, 42).unwrap();
            let traj = sgd_flow(&q, &[1.0, -1.0, 0.5, 2.0], 1.0, 1e-3, &mut proj).unwrap();
            (traj, proj)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa.realized_masks(), pb.realized_masks());
        assert_eq!(pa.realized_masks().len(), 21);
        assert!(pa
            .realized_masks()
            .iter()
            .all(|m| m.iter().filter(|b| **b).count() == 2));
        // Realizing further keeps the prefix.
        let mut longer = ProjectionProcess::new(4, 2, 0.05, 42).unwrap();
        longer.realize_until(3.0);
        assert_eq!(&longer.realized_masks()[..21], pa.realized_masks());
    }

    #[test]
    fn sgd_per_step_decrease_matches_masked_gradient() {
        let q = diag(&[1.0; 4]);
        let dt = 1e-3;
        let mut proj = ProjectionProcess::new(4, 2, 0.05, 7).unwrap();
        let traj = sgd_flow(&q, &[1.0, -1.0, 0.5, 2.0], 1.0, dt, &mut proj).unwrap();
        for i in 0..traj.steps() {
            let x = &traj.states()[i];
            let mask = proj.mask_at(traj.times()[i]);
            let pg: f64 = x.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v * v).sum();
            let decrease = q.value(&traj.states()[i + 1]) - q.value(x);
            assert!((decrease + pg * dt).abs() <= 10.0 * dt * dt);
            assert!(decrease <= 10.0 * dt * dt);
        }
    }

    #[test]
    fn sgd_rejects_short_interval() {
        let mut proj = ProjectionProcess::new(2, 1, 1e-4, 0).unwrap();
        assert!(sgd_flow(&diag(&[1.0, 1.0]), &[1.0, 1.0], 1.0, 1e-3, &mut proj).is_err());
        assert!(ProjectionProcess::new(2, 3, 0.1, 0).is_err());
    }

    #[test]
    fn optimal_cost_identity() {
        let q = diag(&[1.0, 1.0]);
        let traj = gradient_flow(&q, &[1.0, 0.0], 5.0, 1e-3).unwrap();
        let cost = action_euclidean(&traj, &q, &Weighting::Identity, Some(1e-8)).unwrap();
        assert!((cost.total - 0.5).abs() < 1e-4);

        let q = diag(&[1.0, 100.0]);
        let traj = newton_flow(&q, &[1.0, 1.0], 5.0, 1e-3).unwrap();
        let cost = action_euclidean(&traj, &q, &Weighting::InverseHessian, Some(1e-8)).unwrap();
        assert!((cost.total - 50.5).abs() < 1e-3, "{cost:?}");

        let q4 = diag(&[1.0, 2.0, 3.0, 4.0]);
        let residual = |x0: &[f64], dt: f64| {
            let mut proj = ProjectionProcess::new(4, 2, 0.05, 3).unwrap();
            let traj = sgd_flow(&q4, x0, 2.0, dt, &mut proj).unwrap();
            let cost = action_euclidean(&traj, &q4, &Weighting::Projection(proj), Some(1e-8)).unwrap();
            cost.total - q4.value(x0)
        };
        let x0 = [1.0, -1.0, 0.5, 0.5];
        let r = residual(&x0, 1e-3);
        assert!(r >= 0.0 && r < 1e-6 + 10.0 * 1e-6 * 2.0, "{r}");
        let steep = [1.0, -1.0, 0.5, 2.0];
        let ratio = residual(&steep, 2e-3) / residual(&steep, 1e-3);
        assert!((ratio - 4.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn action_requires_feasibility_and_hessian() {
        let q = diag(&[1.0]);
        let traj = Trajectory::new(vec![0.0, 1.0], vec![vec![0.0], vec![0.0]], vec![vec![1.0]]).unwrap();
        assert!(matches!(
            action_euclidean(&traj, &q, &Weighting::Identity, Some(1e-8)),
            Err(FlowError::Infeasible { .. })
        ));
        assert!(action_euclidean(&traj, &q, &Weighting::Identity, None).is_ok());
        #[derive(Debug)]
        struct NoHessian;
        impl Objective for NoHessian {
            fn dimension(&self) -> usize {
                1
            }
            fn value(&self, x: &[f64]) -> f64 {
                x[0]
            }
            fn gradient(&self, _x: &[f64]) -> Vec<f64> {
                vec![1.0]
            }
        }
        assert!(matches!(
            action_euclidean(&traj, &NoHessian, &Weighting::InverseHessian, None),
            Err(FlowError::MissingHessian)
        ));
    }

    #[test]
    fn lagrange_examples() {
        let q = diag(&[1.0, 4.0]);
        let traj = gradient_flow(&q, &[1.0, 1.0], 1.0, 1e-3).unwrap();
        assert!(lagrange_functional(&traj, &q).unwrap().abs() < 1e-6);

        let still = Trajectory::new(
            vec![0.0, 0.5, 1.0],
            vec![vec![1.0, 1.0]; 3],
            vec![vec![0.0, 0.0]; 2],
        )
        .unwrap();
        assert_eq!(lagrange_functional(&still, &q).unwrap(), 0.0);

        let c = [0.3, -2.0];
        let a = Linear {
            slope: vec![1.5, 0.25],
            offset: 7.0,
        };
        let t_final = 2.0;
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let infeasible = Trajectory::new(times, vec![vec![1.0, 1.0]; 21], vec![c.to_vec(); 20]).unwrap();
        let expected = t_final * (c[0] * 1.5 + c[1] * 0.25);
        assert!((lagrange_functional(&infeasible, &a).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn lagrange_vanishes_for_smooth_s() {
        let dt = 1e-2;
        let t_final = 1.0;
        let traj = gradient_flow(&DoubleWell, &[1.8], t_final, dt).unwrap();
        let lam = lagrange_functional(&traj, &diag(&[2.0])).unwrap();
        assert!(lam.abs() < 1e-12);
        let lam = lagrange_functional(&traj, &DoubleWell).unwrap();
        assert!(lam.abs() <= 10.0 * dt * dt * t_final, "{lam}");
    }

    #[test]
    fn dissipation_examples() {
        let q = diag(&[1.0, 1.0]);
        let traj = gradient_flow(&q, &[1.0, 0.0], 1.0, 1e-3).unwrap();
        let s = dissipation_check_euclidean(&traj, &q, &Weighting::Identity).unwrap();
        assert_eq!(s.points[0].rhs, -1.0);
        assert!((s.points[0].lhs + 1.0).abs() < 1e-5);
        assert!(s.max_mismatch < 1e-5);
        assert!(s.points.iter().all(|p| p.rhs <= 0.0));

        let q = diag(&[1.0, 100.0]);
        let traj = newton_flow(&q, &[1.0, 1.0], 1.0, 1e-3).unwrap();
        let s = dissipation_check_euclidean(&traj, &q, &Weighting::InverseHessian).unwrap();
        assert!((s.points[0].rhs + 101.0).abs() < 1e-3);
        assert!((s.points[0].lhs + 101.0).abs() < 1e-3);

        let traj = gradient_flow(&q, &[0.0, 0.0], 1.0, 1e-2).unwrap();
        let s = dissipation_check_euclidean(&traj, &q, &Weighting::Identity).unwrap();
        assert!(s.points.iter().all(|p| p.lhs == 0.0 && p.rhs == 0.0));
    }

    #[test]
    fn gap_examples() {
        let q = diag(&[1.0, 1.0]);
        let report = optimality_gap(&q, &[1.0, 0.0], 5.0, 1e-3, &Weighting::Identity, 100, 0.1, 5).unwrap();
        assert!(report.passes(), "{report:?}");
        assert_eq!(report.samples.len(), 100);
        assert!(report.flagged.is_empty());

        let zero = optimality_gap(&q, &[1.0, 0.0], 5.0, 1e-3, &Weighting::Identity, 10, 0.0, 5).unwrap();
        assert_eq!(zero.gap, 0.0);

        let q = diag(&[1.0, 4.0]);
        let report = optimality_gap(&q, &[1.0, 1.0], 5.0, 1e-3, &Weighting::Identity, 100, 0.05, 6).unwrap();
        assert!(report.samples.iter().all(|s| *s >= 2.5 - report.tolerance));
    }

    #[test]
    fn gap_is_deterministic() {
        let q = diag(&[1.0, 4.0]);
        let run = || optimality_gap(&q, &[1.0, 1.0], 1.0, 1e-2, &Weighting::InverseHessian, 16, 0.1, 77).unwrap();
        assert_eq!(run(), run());
    }
}
