//! The coupled steepest descent of `D(ρ̃‖ρ)` on the product of two
//! Wasserstein spaces.
//!
//! Both densities move with one shared flux `J = ρ̃∇log(ρ̃/ρ) = ρ∇(ρ̃/ρ)`:
//! `∂ρ̃/∂t = ∇·J` and `∂ρ/∂t = −∇·J`. The pointwise sum `ρ̃ + ρ` is therefore
//! invariant and the pair relaxes to its average.
//!
//! On a face between nodes `i` and `j` the flux is `ρ̄_f (rⱼ − rᵢ)/Δx` with
//! `r = ρ̃/ρ` and `ρ̄_f` the arithmetic mean of `ρ`, which is algebraically the
//! same number as `(Δρ̃ − r̄_f Δρ)/Δx` with `r̄_f` the mean ratio. The
//! logarithmic form `ρ̃_f Δlog r/Δx` gives the same value when the face
//! density is `ρ̃_f = ρ̄_f·L(rᵢ, rⱼ)` with `L` the logarithmic mean.
//!
//! The effective diffusivity is `1 + ρ̃/ρ`, which for two separated
//! Gaussians reaches `e^{30}` in the tails, so explicit stepping is hopeless
//! there. In one dimension [`product_flow_run`] uses backward Euler: Newton
//! on `u = log(ρ̃/ρ)` with `ρ̃ = s·σ(u)`, `ρ = s·(1 − σ(u))`, `s` the
//! conserved sum, and a tridiagonal Jacobian. Two-dimensional grids use the
//! explicit [`product_step`] under its stability bound.

use rayon::prelude::*;
use serde::Serialize;

use crate::density::{
    check_support, floor_flagged, relative_entropy, relative_fisher, Grid, GridDensity,
    VelocityField, DENSITY_FLOOR, NEGATIVE_TOLERANCE,
};
use crate::error::{FlowError, Result};
use crate::perturb::{sample_rng, SpaceTimeBump};
use crate::wasserstein::{cfl_ratio, collect_samples, continuity_step, CFL_LIMIT, SNAPSHOT_INTERVALS};
use crate::{AccountedCost, GapReport};

/// Explicit stability: `dt·dim·max(1 + ρ̃/ρ) ≤ 0.4·Δx²`.
pub const PRODUCT_STABILITY: f64 = 0.4;

/// Default local error tolerance of the adaptive run, per accepted step.
pub const DEFAULT_ERROR_TOLERANCE: f64 = 1e-5;

/// Default stopping threshold on the relative Fisher information.
pub const DEFAULT_FISHER_STOP: f64 = 1e-6;

/// Slack on the per-step divergence increase before a step is rejected.
pub const LYAPUNOV_SLACK: f64 = 1e-8;

const MAX_NEWTON_ITERATIONS: usize = 60;
const MAX_NEWTON_UPDATE: f64 = 2.0;
const LOG_RATIO_BOUND: f64 = 690.0;
const MIN_STEP: f64 = 1e-14;
const INITIAL_STEP: f64 = 1e-6;

/// A pair of densities on one grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductState {
    tilde: GridDensity,
    rho: GridDensity,
}

impl ProductState {
    /// Both densities must share a grid and have unit mass within 1e-9.
    pub fn new(tilde: GridDensity, rho: GridDensity) -> Result<Self> {
        if tilde.grid() != rho.grid() {
            return Err(FlowError::GridMismatch);
        }
        for (name, d) in [("rho_tilde", &tilde), ("rho", &rho)] {
            let mass = d.mass();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(FlowError::InvalidParameter {
                    name: if name == "rho" { "rho" } else { "rho_tilde" },
                    reason: format!("mass {mass} is not 1"),
                });
            }
        }
        Ok(Self { tilde, rho })
    }

    fn from_values(grid: &Grid, tilde: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        Self::new(GridDensity::new(grid.clone(), tilde)?, GridDensity::new(grid.clone(), rho)?)
    }

    pub fn tilde(&self) -> &GridDensity {
        &self.tilde
    }

    pub fn rho(&self) -> &GridDensity {
        &self.rho
    }

    pub fn grid(&self) -> &Grid {
        self.tilde.grid()
    }

    /// The pointwise sum `ρ̃ + ρ`.
    pub fn sum_field(&self) -> Vec<f64> {
        self.tilde
            .values()
            .iter()
            .zip(self.rho.values())
            .map(|(a, b)| a + b)
            .collect()
    }

    /// `D(ρ̃‖ρ)`.
    pub fn divergence(&self) -> Result<f64> {
        relative_entropy(&self.tilde, &self.rho)
    }

    pub fn fisher(&self) -> Result<f64> {
        relative_fisher(&self.tilde, &self.rho)
    }

    /// The average `½(ρ̃ + ρ)`, the long-time limit of the coupled flow.
    pub fn barycenter(&self) -> Result<GridDensity> {
        GridDensity::new(
            self.grid().clone(),
            self.sum_field().into_iter().map(|v| 0.5 * v).collect(),
        )
    }
}

/// One value per interior face, per axis, in [`Grid::for_each_face`] order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaceFlux {
    pub faces: Vec<Vec<f64>>,
}

impl FaceFlux {
    pub fn max_abs(&self) -> f64 {
        self.faces
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Discrete divergence `Σ_axes (J_{+} − J_{−})/Δx` at every node.
    pub fn divergence(&self, grid: &Grid) -> Vec<f64> {
        let mut div = vec![0.0; grid.len()];
        for (axis, faces) in self.faces.iter().enumerate() {
            let inv = 1.0 / grid.spacing(axis);
            grid.for_each_face(axis, |f, lo, hi| {
                div[lo] += faces[f] * inv;
                div[hi] -= faces[f] * inv;
            });
        }
        div
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    a / b.max(DENSITY_FLOOR)
}

fn face_active(t: &[f64], r: &[f64], lo: usize, hi: usize) -> bool {
    // A face carries flux unless both of its nodes are vacuum for either
    // density.
    let node = |i: usize| t[i] > DENSITY_FLOOR && r[i] > DENSITY_FLOOR;
    node(lo) || node(hi)
}

/// The shared flux `J = ∇ρ̃ − (ρ̃/ρ)∇ρ` at cell faces, with the ratio on the
/// face taken as the mean of the nodal ratios.
pub fn shared_flux(state: &ProductState) -> Result<FaceFlux> {
    check_support(&state.tilde, &state.rho)?;
    let grid = state.grid();
    let (t, r) = (state.tilde.values(), state.rho.values());
    let faces = (0..grid.dimension())
        .map(|axis| {
            let h = grid.spacing(axis);
            let mut out = vec![0.0; grid.face_count(axis)];
            grid.for_each_face(axis, |f, lo, hi| {
                if face_active(t, r, lo, hi) {
                    let mean_ratio = 0.5 * (ratio(t[lo], r[lo]) + ratio(t[hi], r[hi]));
                    out[f] = ((t[hi] - t[lo]) - mean_ratio * (r[hi] - r[lo])) / h;
                }
            });
            out
        })
        .collect();
    Ok(FaceFlux { faces })
}

/// Logarithmic mean `(b − a)/(log b − log a)`, with `la = log a`, `lb = log b`.
fn log_mean(a: f64, b: f64, la: f64, lb: f64) -> f64 {
    let d = lb - la;
    if d == 0.0 {
        a
    } else {
        (b - a) / d
    }
}

/// The two textbook face fluxes: `ρ̃_f Δlog(ρ̃/ρ)/Δx` with the
/// logarithmic-mean face density, and `ρ̄_f Δ(ρ̃/ρ)/Δx` with the arithmetic
/// mean of `ρ`.
pub fn flux_forms(state: &ProductState) -> Result<(FaceFlux, FaceFlux)> {
    check_support(&state.tilde, &state.rho)?;
    let grid = state.grid();
    let (t, r) = (state.tilde.values(), state.rho.values());
    let ratios: Vec<f64> = t.iter().zip(r).map(|(a, b)| ratio(*a, *b)).collect();
    let logs: Vec<f64> = t
        .iter()
        .zip(r)
        .map(|(a, b)| a.max(DENSITY_FLOOR).ln() - b.max(DENSITY_FLOOR).ln())
        .collect();
    let mut log_form = Vec::new();
    let mut ratio_form = Vec::new();
    for axis in 0..grid.dimension() {
        let h = grid.spacing(axis);
        let mut a = vec![0.0; grid.face_count(axis)];
        let mut b = vec![0.0; grid.face_count(axis)];
        grid.for_each_face(axis, |f, lo, hi| {
            if face_active(t, r, lo, hi) {
                let rho_face = 0.5 * (r[lo] + r[hi]);
                let tilde_face = rho_face * log_mean(ratios[lo], ratios[hi], logs[lo], logs[hi]);
                a[f] = tilde_face * (logs[hi] - logs[lo]) / h;
                b[f] = rho_face * (ratios[hi] - ratios[lo]) / h;
            }
        });
        log_form.push(a);
        ratio_form.push(b);
    }
    Ok((FaceFlux { faces: log_form }, FaceFlux { faces: ratio_form }))
}

/// `dt·dim·max(1 + ρ̃/ρ)/(0.4·Δx²)` over nodes where both densities are
/// above the floor; explicit steps need this to be at most 1.
pub fn product_stability_ratio(state: &ProductState, dt: f64) -> f64 {
    let grid = state.grid();
    let max_ratio = state
        .tilde
        .values()
        .iter()
        .zip(state.rho.values())
        .filter(|(a, b)| **a > DENSITY_FLOOR && **b > DENSITY_FLOOR)
        .map(|(a, b)| 1.0 + a / b)
        .fold(1.0, f64::max);
    let h = grid.min_spacing();
    dt * grid.dimension() as f64 * max_ratio / (PRODUCT_STABILITY * h * h)
}

fn check_step_values(values: &[f64]) -> Result<()> {
    match values
        .iter()
        .enumerate()
        .find(|(_, v)| **v < -NEGATIVE_TOLERANCE || !v.is_finite())
    {
        Some((node, &value)) => Err(FlowError::NegativeDensity { node, value }),
        None => Ok(()),
    }
}

/// One explicit step: `ρ̃ ← ρ̃ + dt·∇·J`, `ρ ← ρ − dt·∇·J` with the same
/// discrete divergence of the shared flux.
pub fn product_step(state: &ProductState, dt: f64) -> Result<ProductState> {
    let ratio = product_stability_ratio(state, dt);
    if ratio > 1.0 {
        return Err(FlowError::StabilityViolation { ratio, limit: 1.0 });
    }
    let grid = state.grid();
    let div = shared_flux(state)?.divergence(grid);
    let tilde: Vec<f64> = state.tilde.values().iter().zip(&div).map(|(v, d)| v + dt * d).collect();
    let rho: Vec<f64> = state.rho.values().iter().zip(&div).map(|(v, d)| v - dt * d).collect();
    check_step_values(&tilde)?;
    check_step_values(&rho)?;
    ProductState::from_values(grid, tilde, rho)
}

/// Solves a tridiagonal system in place by Gaussian elimination with partial
/// pivoting. `lower[i]` couples row `i + 1` to column `i`, `upper[i]` row `i`
/// to column `i + 1`. The solution overwrites `rhs`. Returns `false` on an
/// exactly singular pivot.
fn solve_tridiagonal(lower: &mut [f64], diag: &mut [f64], upper: &mut [f64], rhs: &mut [f64]) -> bool {
    let n = diag.len();
    if n == 0 {
        return true;
    }
    // Second superdiagonal created by row interchanges.
    let mut fill = vec![0.0; n.saturating_sub(2)];
    for i in 0..n - 1 {
        if diag[i].abs() >= lower[i].abs() {
            if diag[i] == 0.0 {
                return false;
            }
            let fact = lower[i] / diag[i];
            diag[i + 1] -= fact * upper[i];
            rhs[i + 1] -= fact * rhs[i];
        } else {
            let fact = diag[i] / lower[i];
            diag[i] = lower[i];
            let temp = diag[i + 1];
            diag[i + 1] = upper[i] - fact * temp;
            if i + 2 < n {
                fill[i] = upper[i + 1];
                upper[i + 1] = -fact * fill[i];
            }
            upper[i] = temp;
            let b = rhs[i];
            rhs[i] = rhs[i + 1];
            rhs[i + 1] = b - fact * rhs[i + 1];
        }
    }
    if diag[n - 1] == 0.0 {
        return false;
    }
    rhs[n - 1] /= diag[n - 1];
    if n > 1 {
        rhs[n - 2] = (rhs[n - 2] - upper[n - 2] * rhs[n - 1]) / diag[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        rhs[i] = (rhs[i] - upper[i] * rhs[i + 1] - fill[i] * rhs[i + 2]) / diag[i];
    }
    true
}

/// Splits the conserved sum `s` by `u = log(ρ̃/ρ)` without overflow:
/// returns `(ρ̃, ρ, ρ̃ρ/s)`.
fn split(s: f64, u: f64) -> (f64, f64, f64) {
    if u >= 0.0 {
        let q = (-u).exp();
        let t = s / (1.0 + q);
        let r = t * q;
        (t, r, r / (1.0 + q))
    } else {
        let p = u.exp();
        let r = s / (1.0 + p);
        let t = r * p;
        (t, r, t / (1.0 + p))
    }
}

fn initial_log_ratio(t: &[f64], r: &[f64]) -> Vec<f64> {
    t.iter()
        .zip(r)
        .map(|(a, b)| {
            (a.max(f64::MIN_POSITIVE).ln() - b.max(f64::MIN_POSITIVE).ln())
                .clamp(-LOG_RATIO_BOUND, LOG_RATIO_BOUND)
        })
        .collect()
}

/// Result of one backward-Euler step.
#[derive(Debug, Clone)]
pub struct ImplicitStep {
    pub state: ProductState,
    /// Converged `log(ρ̃/ρ)`, a good starting guess for the next step.
    pub log_ratio: Vec<f64>,
    pub iterations: usize,
}

/// One backward-Euler step of the coupled flow on a 1D grid.
///
/// Newton's method solves for `u = log(ρ̃/ρ)` at the new time with the sum
/// `s = ρ̃ + ρ` held at its old value. The residual of each node is written
/// for whichever density is smaller there, so that nodes deep in one
/// density's tail converge in relative terms. Once converged, both densities
/// are updated with the same flux divergence, so `ρ̃ + ρ` changes only by
/// rounding.
pub fn implicit_product_step(state: &ProductState, dt: f64, guess: Option<&[f64]>) -> Result<ImplicitStep> {
    let grid = state.grid();
    if grid.dimension() != 1 {
        return Err(FlowError::NotOneDimensional(grid.dimension()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(FlowError::InvalidParameter {
            name: "dt",
            reason: format!("must be positive, got {dt}"),
        });
    }
    check_support(&state.tilde, &state.rho)?;
    let (t0, r0) = (state.tilde.values(), state.rho.values());
    let n = t0.len();
    let k = dt / grid.spacing(0).powi(2);
    let s: Vec<f64> = t0.iter().zip(r0).map(|(a, b)| (a + b).max(0.0)).collect();
    let mut u = match guess {
        Some(g) if g.len() == n => g.to_vec(),
        _ => initial_log_ratio(t0, r0),
    };

    let mut tt = vec![0.0; n];
    let mut rr = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut ex = vec![0.0; n];
    let mut flux = vec![0.0; n - 1];
    let mut d_lo = vec![0.0; n - 1];
    let mut d_hi = vec![0.0; n - 1];
    let (mut lower, mut diag, mut upper, mut rhs) =
        (vec![0.0; n - 1], vec![0.0; n], vec![0.0; n - 1], vec![0.0; n]);
    let mut row_inv = vec![1.0; n];

    let evaluate = |u: &[f64], tt: &mut [f64], rr: &mut [f64], w: &mut [f64], ex: &mut [f64], flux: &mut [f64]| {
        for i in 0..n {
            let (a, b, c) = split(s[i], u[i]);
            tt[i] = a;
            rr[i] = b;
            w[i] = c;
            ex[i] = u[i].exp();
        }
        for f in 0..n - 1 {
            flux[f] = 0.5 * (rr[f] + rr[f + 1]) * (ex[f + 1] - ex[f]);
        }
    };

    let mut iterations = 0;
    loop {
        evaluate(&u, &mut tt, &mut rr, &mut w, &mut ex, &mut flux);
        let mut converged = true;
        for i in 0..n {
            let f_plus = if i + 1 < n { flux[i] } else { 0.0 };
            let f_minus = if i > 0 { flux[i - 1] } else { 0.0 };
            let change = k * (f_plus - f_minus);
            let transport = k * (f_plus.abs() + f_minus.abs());
            let (g, scale) = if tt[i] <= rr[i] {
                (tt[i] - t0[i] - change, tt[i] + t0[i].abs() + transport)
            } else {
                (-(rr[i] - r0[i] + change), rr[i] + r0[i].abs() + transport)
            };
            if s[i] == 0.0 {
                rhs[i] = 0.0;
                diag[i] = 1.0;
                continue;
            }
            let bound = 1e-10 * tt[i].min(rr[i]) + 8.0 * f64::EPSILON * scale;
            if !(g.abs() <= bound) {
                converged = false;
            }
            let inv = if scale > 0.0 { 1.0 / scale } else { 1.0 };
            row_inv[i] = inv;
            rhs[i] = -g * inv;
            diag[i] = w[i] * inv;
        }
        if converged {
            break;
        }
        if iterations == MAX_NEWTON_ITERATIONS {
            return Err(FlowError::SolverFailure { time: f64::NAN });
        }
        iterations += 1;
        // Flux derivatives with respect to the two adjacent unknowns.
        for f in 0..n - 1 {
            let dr = ex[f + 1] - ex[f];
            let mean = 0.5 * (rr[f] + rr[f + 1]);
            d_lo[f] = -0.5 * w[f] * dr - mean * ex[f];
            d_hi[f] = -0.5 * w[f + 1] * dr + mean * ex[f + 1];
        }
        for i in 0..n {
            if s[i] == 0.0 {
                if i + 1 < n {
                    upper[i] = 0.0;
                }
                if i > 0 {
                    lower[i - 1] = 0.0;
                }
                continue;
            }
            let inv = row_inv[i];
            if i + 1 < n {
                diag[i] -= k * d_lo[i] * inv;
                upper[i] = -k * d_hi[i] * inv;
            }
            if i > 0 {
                diag[i] += k * d_hi[i - 1] * inv;
                lower[i - 1] = k * d_lo[i - 1] * inv;
            }
        }
        if !solve_tridiagonal(&mut lower, &mut diag, &mut upper, &mut rhs) {
            return Err(FlowError::SolverFailure { time: f64::NAN });
        }
        for i in 0..n {
            let du = rhs[i];
            if !du.is_finite() {
                return Err(FlowError::SolverFailure { time: f64::NAN });
            }
            if s[i] > 0.0 {
                u[i] = (u[i] + du.clamp(-MAX_NEWTON_UPDATE, MAX_NEWTON_UPDATE))
                    .clamp(-LOG_RATIO_BOUND, LOG_RATIO_BOUND);
            }
        }
    }

    let mut tilde = t0.to_vec();
    let mut rho = r0.to_vec();
    for f in 0..n - 1 {
        let moved = k * flux[f];
        tilde[f] += moved;
        tilde[f + 1] -= moved;
        rho[f] -= moved;
        rho[f + 1] += moved;
    }
    check_step_values(&tilde)?;
    check_step_values(&rho)?;
    Ok(ImplicitStep {
        state: ProductState::from_values(grid, tilde, rho)?,
        log_ratio: u,
        iterations,
    })
}

/// `∇log(ρ̃/ρ)` at the nodes, the ratio, and the nodes where both
/// densities are above the floor.
fn log_ratio_gradient(state: &ProductState) -> (Vec<Vec<f64>>, Vec<f64>, Vec<bool>) {
    let grid = state.grid();
    let (t, r) = (state.tilde.values(), state.rho.values());
    let logs: Vec<f64> = t
        .iter()
        .zip(r)
        .map(|(a, b)| a.max(DENSITY_FLOOR).ln() - b.max(DENSITY_FLOOR).ln())
        .collect();
    let ratios = logs.iter().map(|l| l.exp()).collect();
    let active = t
        .iter()
        .zip(r)
        .map(|(a, b)| *a > DENSITY_FLOOR && *b > DENSITY_FLOOR)
        .collect();
    (grid.gradient(&logs), ratios, active)
}

/// The optimal velocities `ṽ* = −∇log(ρ̃/ρ)` and `v* = ∇(ρ̃/ρ)`, the latter
/// formed as `(ρ̃/ρ)∇log(ρ̃/ρ)`.
pub fn optimal_velocities(state: &ProductState) -> Result<(VelocityField, VelocityField)> {
    let (first, second) = crate::density::wasserstein_gradient_pair(&state.tilde, &state.rho)?;
    Ok((first.scaled(-1.0), second.scaled(-1.0)))
}

/// Both forms of the divergence dissipation rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReffRate {
    /// `−∫(1 + ρ̃/ρ)‖∇log(ρ̃/ρ)‖²ρ̃`.
    pub combined: f64,
    /// `−[∫‖∇log(ρ̃/ρ)‖²ρ̃ + ∫‖∇(ρ̃/ρ)‖²ρ]`.
    pub split: f64,
}

impl ReffRate {
    pub fn relative_mismatch(&self) -> f64 {
        (self.combined - self.split).abs() / self.combined.abs().max(f64::MIN_POSITIVE)
    }
}

/// Rate of change of `D(ρ̃‖ρ)` along the coupled flow.
pub fn reff_rate(state: &ProductState) -> Result<ReffRate> {
    check_support(&state.tilde, &state.rho)?;
    let grid = state.grid();
    let (grad, ratios, active) = log_ratio_gradient(state);
    let (t, r) = (state.tilde.values(), state.rho.values());
    let mut combined = Vec::with_capacity(grid.len());
    let mut split = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        if !active[i] {
            combined.push(0.0);
            split.push(0.0);
            continue;
        }
        let g2: f64 = grad.iter().map(|c| c[i] * c[i]).sum();
        combined.push((1.0 + ratios[i]) * g2 * t[i]);
        split.push(g2 * t[i] + ratios[i] * ratios[i] * g2 * r[i]);
    }
    Ok(ReffRate {
        combined: -grid.integrate(&combined),
        split: -grid.integrate(&split),
    })
}

/// `∫∇log(ρ̃/ρ)·(ṽ − v)ρ̃`: the rate of `D(ρ̃‖ρ)` when `ρ̃` and `ρ` are
/// transported by `ṽ` and `v`.
pub fn pt_rate(state: &ProductState, v_tilde: &VelocityField, v: &VelocityField) -> Result<f64> {
    if v_tilde.grid() != state.grid() || v.grid() != state.grid() {
        return Err(FlowError::GridMismatch);
    }
    let grid = state.grid();
    let (grad, _, active) = log_ratio_gradient(state);
    let t = state.tilde.values();
    let integrand: Vec<f64> = (0..grid.len())
        .map(|i| {
            if !active[i] {
                return 0.0;
            }
            (0..grid.dimension())
                .map(|a| grad[a][i] * (v_tilde.component(a)[i] - v.component(a)[i]))
                .sum::<f64>()
                * t[i]
        })
        .collect();
    Ok(grid.integrate(&integrand))
}

/// Running-cost rate `½∫[‖ṽ‖²ρ̃ + ‖v‖²ρ + ‖∇log(ρ̃/ρ)‖²ρ̃ + ‖∇(ρ̃/ρ)‖²ρ]`.
pub fn product_running_rate(state: &ProductState, v_tilde: &VelocityField, v: &VelocityField) -> Result<f64> {
    if v_tilde.grid() != state.grid() || v.grid() != state.grid() {
        return Err(FlowError::GridMismatch);
    }
    Ok(running_rate_with(state, Some((v_tilde, v)), None))
}

/// The running-cost rate with optional explicit velocities; `None` means the
/// optimal pair. `extra` adds `(scale·b̃, scale·b)` on top of the velocities.
fn running_rate_with(
    state: &ProductState,
    velocities: Option<(&VelocityField, &VelocityField)>,
    extra: Option<(&VelocityField, &VelocityField, f64)>,
) -> f64 {
    let grid = state.grid();
    let (grad, ratios, active) = log_ratio_gradient(state);
    let (t, r) = (state.tilde.values(), state.rho.values());
    let dim = grid.dimension();
    let integrand: Vec<f64> = (0..grid.len())
        .map(|i| {
            let g2: f64 = if active[i] { grad.iter().map(|c| c[i] * c[i]).sum() } else { 0.0 };
            let potential = g2 * t[i] + ratios[i] * ratios[i] * g2 * r[i];
            let mut kin_t = 0.0;
            let mut kin_r = 0.0;
            for a in 0..dim {
                let (mut vt, mut vr) = match velocities {
                    Some((vt, vr)) => (vt.component(a)[i], vr.component(a)[i]),
                    None if active[i] => (-grad[a][i], ratios[i] * grad[a][i]),
                    None => (0.0, 0.0),
                };
                if let Some((bt, br, scale)) = extra {
                    vt += scale * bt.component(a)[i];
                    vr += scale * br.component(a)[i];
                }
                kin_t += vt * vt;
                kin_r += vr * vr;
            }
            0.5 * (kin_t * t[i] + kin_r * r[i] + potential)
        })
        .collect();
    grid.integrate(&integrand)
}

/// Action of a path of density pairs: the trapezoid rule in time of
/// [`product_running_rate`] plus the terminal divergence.
pub fn product_action(
    path: &[ProductState],
    v_tilde: &[VelocityField],
    v: &[VelocityField],
    times: &[f64],
) -> Result<AccountedCost> {
    if path.is_empty() || path.len() != v_tilde.len() || path.len() != v.len() || path.len() != times.len() {
        return Err(FlowError::InvalidParameter {
            name: "path",
            reason: format!(
                "{} states, {}/{} velocities and {} times",
                path.len(),
                v_tilde.len(),
                v.len(),
                times.len()
            ),
        });
    }
    let grid = path[0].grid();
    let mut rates = Vec::with_capacity(path.len());
    for ((s, a), b) in path.iter().zip(v_tilde).zip(v) {
        if s.grid() != grid {
            return Err(FlowError::GridMismatch);
        }
        rates.push(product_running_rate(s, a, b)?);
    }
    let running = (1..path.len())
        .map(|k| 0.5 * (times[k] - times[k - 1]) * (rates[k] + rates[k - 1]))
        .sum();
    Ok(AccountedCost::new(running, path[path.len() - 1].divergence()?))
}

/// Tracked quantities of a coupled run, one entry per accepted step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductReport {
    pub times: Vec<f64>,
    pub divergence_series: Vec<f64>,
    pub reff_rate_series: Vec<f64>,
    pub fisher_series: Vec<f64>,
    /// Max-norm deviation of `ρ̃ + ρ` from its initial field.
    pub sum_drift_series: Vec<f64>,
    pub mass_tilde_series: Vec<f64>,
    pub mass_series: Vec<f64>,
    pub action_running: Vec<f64>,
    pub terminal_divergence: f64,
    /// Largest `max_i |Δρ̃ᵢ + Δρᵢ|` over all steps.
    pub max_antisymmetry: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Whether the run stopped on the Fisher threshold before `T`.
    pub fisher_stop: bool,
    /// True when the density floor was active on more than 1% of the
    /// mass-carrying nodes of the initial pair.
    pub floor_flagged: bool,
}

impl ProductReport {
    pub fn action(&self) -> AccountedCost {
        AccountedCost::new(
            *self.action_running.last().unwrap_or(&0.0),
            self.terminal_divergence,
        )
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

/// Knobs of the adaptive coupled run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProductRunConfig {
    pub t_final: f64,
    /// Upper bound on the step size.
    pub dt_max: f64,
    /// Local error tolerance `½·dt·|R(tₙ₊₁) − R(tₙ)|` on the running-cost
    /// rate `R`.
    pub error_tolerance: f64,
    /// Stop once the relative Fisher information drops below this.
    pub fisher_stop: f64,
    /// Keep every accepted state (memory heavy; for tests).
    pub keep_path: bool,
}

impl ProductRunConfig {
    pub fn new(t_final: f64, dt_max: f64) -> Self {
        Self {
            t_final,
            dt_max,
            error_tolerance: DEFAULT_ERROR_TOLERANCE,
            fisher_stop: DEFAULT_FISHER_STOP,
            keep_path: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(FlowError::InvalidParameter {
                name: "t_final",
                reason: format!("must be positive, got {}", self.t_final),
            });
        }
        if !(self.dt_max.is_finite() && self.dt_max > 0.0 && self.dt_max <= self.t_final) {
            return Err(FlowError::InvalidParameter {
                name: "dt",
                reason: format!("must lie in (0, T], got {}", self.dt_max),
            });
        }
        if !(self.error_tolerance > 0.0) {
            return Err(FlowError::InvalidParameter {
                name: "error_tolerance",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Snapshots, report and (optionally) the full path of a coupled run.
#[derive(Debug, Clone)]
pub struct ProductRun {
    pub snapshots: Vec<ProductState>,
    pub snapshot_times: Vec<f64>,
    pub report: ProductReport,
    /// Every accepted state with its time, when requested.
    pub path: Option<Vec<(f64, ProductState)>>,
    pub initial_sum: Vec<f64>,
}

/// A perturbation applied on top of the optimal velocities: one bump per
/// component and a magnitude.
struct Perturbation<'a> {
    tilde: &'a SpaceTimeBump,
    rho: &'a SpaceTimeBump,
    magnitude: f64,
}

/// The stepping engine shared by the optimal run and the perturbed runs.
struct Stepper<'a> {
    config: &'a ProductRunConfig,
    perturbation: Option<Perturbation<'a>>,
    /// Step cap that keeps the perturbation's upwind transport within CFL.
    cfl_cap: f64,
}

impl<'a> Stepper<'a> {
    fn new(config: &'a ProductRunConfig, perturbation: Option<Perturbation<'a>>) -> Self {
        let cfl_cap = match &perturbation {
            Some(p) if p.magnitude != 0.0 => {
                let unit = [p.tilde, p.rho]
                    .iter()
                    .flat_map(|b| {
                        [
                            cfl_ratio(b.profile(), 1.0),
                            cfl_ratio(&b.profile().scaled(-1.0), 1.0),
                        ]
                    })
                    .fold(0.0, f64::max)
                    * p.magnitude.abs();
                if unit > 0.0 {
                    0.99 * CFL_LIMIT / unit
                } else {
                    f64::INFINITY
                }
            }
            _ => f64::INFINITY,
        };
        Self {
            config,
            perturbation,
            cfl_cap,
        }
    }

    fn rate(&self, state: &ProductState, t: f64) -> f64 {
        match &self.perturbation {
            Some(p) if p.magnitude != 0.0 => running_rate_with(
                state,
                None,
                Some((
                    &p.tilde.at(t),
                    &p.rho.at(t),
                    p.magnitude,
                )),
            ),
            _ => running_rate_with(state, None, None),
        }
    }

    /// One step of size `h` from `t`: the optimal coupled step followed by
    /// the perturbation's transport.
    fn advance(&self, state: &ProductState, guess: Option<&[f64]>, t: f64, h: f64) -> Result<(ProductState, Option<Vec<f64>>)> {
        let (next, log_ratio) = if state.grid().dimension() == 1 {
            let step = implicit_product_step(state, h, guess)?;
            (step.state, Some(step.log_ratio))
        } else {
            (product_step(state, h)?, None)
        };
        match &self.perturbation {
            Some(p) if p.magnitude != 0.0 => {
                let tilde = continuity_step(next.tilde(), &p.tilde.at(t).scaled(p.magnitude), h)?;
                let rho = continuity_step(next.rho(), &p.rho.at(t).scaled(p.magnitude), h)?;
                Ok((ProductState::new(tilde, rho)?, None))
            }
            _ => Ok((next, log_ratio)),
        }
    }

    fn explicit_cap(&self, state: &ProductState) -> f64 {
        if state.grid().dimension() == 1 {
            f64::INFINITY
        } else {
            // product_stability_ratio is linear in dt.
            0.99 / product_stability_ratio(state, 1.0)
        }
    }

    fn run(&self, state0: &ProductState) -> Result<ProductRun> {
        let cfg = self.config;
        cfg.validate()?;
        check_support(state0.tilde(), state0.rho())?;
        let lyapunov = self.perturbation.as_ref().is_none_or(|p| p.magnitude == 0.0);
        let initial_sum = state0.sum_field();
        let snapshot_every = cfg.t_final / SNAPSHOT_INTERVALS as f64;

        let mut report = ProductReport {
            times: Vec::new(),
            divergence_series: Vec::new(),
            reff_rate_series: Vec::new(),
            fisher_series: Vec::new(),
            sum_drift_series: Vec::new(),
            mass_tilde_series: Vec::new(),
            mass_series: Vec::new(),
            action_running: Vec::new(),
            terminal_divergence: 0.0,
            max_antisymmetry: 0.0,
            accepted_steps: 0,
            rejected_steps: 0,
            fisher_stop: false,
            floor_flagged: floor_flagged(state0.tilde(), state0.rho()),
        };
        let record = |report: &mut ProductReport, s: &ProductState, t: f64, d: f64, fisher: f64, running: f64| -> Result<()> {
            report.times.push(t);
            report.divergence_series.push(d);
            report.reff_rate_series.push(reff_rate(s)?.combined);
            report.fisher_series.push(fisher);
            let drift = s
                .sum_field()
                .iter()
                .zip(&initial_sum)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            report.sum_drift_series.push(drift);
            report.mass_tilde_series.push(s.tilde().mass());
            report.mass_series.push(s.rho().mass());
            report.action_running.push(running);
            Ok(())
        };

        let mut state = state0.clone();
        let mut t = 0.0;
        let mut d = state.divergence()?;
        let mut fisher = state.fisher()?;
        let mut rate = self.rate(&state, t);
        let mut running = 0.0;
        let mut guess: Option<Vec<f64>> = None;
        let mut h = cfg.dt_max.min(INITIAL_STEP);
        record(&mut report, &state, t, d, fisher, running)?;
        let mut snapshots = vec![state.clone()];
        let mut snapshot_times = vec![0.0];
        let mut next_snapshot = snapshot_every;
        let mut path = cfg.keep_path.then(|| vec![(0.0, state.clone())]);

        while t < cfg.t_final * (1.0 - 1e-12) {
            if lyapunov && fisher < cfg.fisher_stop {
                report.fisher_stop = true;
                break;
            }
            h = h
                .min(cfg.dt_max)
                .min(cfg.t_final - t)
                .min(self.cfl_cap)
                .min(self.explicit_cap(&state));
            if h < MIN_STEP {
                return Err(FlowError::SolverFailure { time: t });
            }
            let (next, next_guess) = match self.advance(&state, guess.as_deref(), t, h) {
                Ok(v) => v,
                Err(FlowError::SolverFailure { .. }) | Err(FlowError::NegativeDensity { .. }) => {
                    report.rejected_steps += 1;
                    h *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let d_next = next.divergence()?;
            if lyapunov && d_next > d + LYAPUNOV_SLACK {
                report.rejected_steps += 1;
                h *= 0.5;
                continue;
            }
            let rate_next = self.rate(&next, t + h);
            let err = 0.5 * h * (rate_next - rate).abs();
            let factor = if err > 0.0 {
                0.9 * (cfg.error_tolerance / err).sqrt()
            } else {
                2.0
            };
            if err > cfg.error_tolerance {
                report.rejected_steps += 1;
                h *= factor.max(0.2);
                continue;
            }
            if lyapunov {
                let antisym = next
                    .tilde()
                    .values()
                    .iter()
                    .zip(state.tilde().values())
                    .zip(next.rho().values().iter().zip(state.rho().values()))
                    .map(|((a1, a0), (b1, b0))| ((a1 - a0) + (b1 - b0)).abs())
                    .fold(0.0, f64::max);
                report.max_antisymmetry = report.max_antisymmetry.max(antisym);
            }
            running += 0.5 * h * (rate + rate_next);
            t = if cfg.t_final - (t + h) < 1e-12 * cfg.t_final { cfg.t_final } else { t + h };
            state = next;
            guess = next_guess;
            d = d_next;
            rate = rate_next;
            fisher = state.fisher()?;
            report.accepted_steps += 1;
            record(&mut report, &state, t, d, fisher, running)?;
            if let Some(p) = path.as_mut() {
                p.push((t, state.clone()));
            }
            if t >= next_snapshot - 1e-12 * cfg.t_final && t < cfg.t_final {
                snapshots.push(state.clone());
                snapshot_times.push(t);
                while next_snapshot <= t + 1e-12 * cfg.t_final {
                    next_snapshot += snapshot_every;
                }
            }
            h *= factor.min(2.0);
        }
        if *snapshot_times.last().unwrap() < t {
            snapshots.push(state.clone());
            snapshot_times.push(t);
        }
        report.terminal_divergence = d;
        Ok(ProductRun {
            snapshots,
            snapshot_times,
            report,
            path,
            initial_sum,
        })
    }
}

/// Runs the coupled flow from `state0` with [`ProductRunConfig::new`]
/// defaults: adaptive steps up to `dt`, stopping at `T` or once the relative
/// Fisher information falls below `1e-6`.
pub fn product_flow_run(state0: &ProductState, t_final: f64, dt: f64) -> Result<ProductRun> {
    product_flow_run_with(state0, &ProductRunConfig::new(t_final, dt))
}

/// Runs the coupled flow with explicit settings.
///
/// Steps are rejected and halved when the implicit solve fails or the
/// divergence increases by more than `LYAPUNOV_SLACK`, and resized from the
/// local error of the running-cost rate otherwise. The running action is the
/// trapezoid rule over accepted steps of the rate with optimal velocities.
pub fn product_flow_run_with(state0: &ProductState, config: &ProductRunConfig) -> Result<ProductRun> {
    Stepper::new(config, None).run(state0)
}

/// Perturbation study around the coupled flow.
///
/// Sample `k` adds independent seeded space-time bumps `ε·b̃_k`, `ε·b_k` to the
/// optimal velocities of `ρ̃` and `ρ` in closed loop: each step takes the
/// optimal coupled step and then transports each density with its bump by
/// [`continuity_step`]. The optimal total comes from the same routine with
/// `ε = 0`. The reported tolerance is `1e-2` plus the optimal run's deviation
/// from `D(ρ̃0‖ρ0)`.
pub fn optimality_gap_product(
    state0: &ProductState,
    t_final: f64,
    dt: f64,
    count: usize,
    magnitude: f64,
    seed: u64,
) -> Result<GapReport> {
    let mut config = ProductRunConfig::new(t_final, dt);
    // The perturbed runs compare totals at the same horizon.
    config.fisher_stop = 0.0;
    let optimal = Stepper::new(&config, None).run(state0)?;
    let optimal_total = optimal.report.action().total;
    let d0 = state0.divergence()?;
    let grid = state0.grid();

    let results: Vec<Result<Option<f64>>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = sample_rng(seed, k as u64);
            let bt = SpaceTimeBump::sample(grid, t_final, &mut rng);
            let br = SpaceTimeBump::sample(grid, t_final, &mut rng);
            let stepper = Stepper::new(
                &config,
                Some(Perturbation {
                    tilde: &bt,
                    rho: &br,
                    magnitude,
                }),
            );
            match stepper.run(state0) {
                Ok(run) => Ok(Some(run.report.action().total)),
                Err(FlowError::CflViolation { .. })
                | Err(FlowError::SolverFailure { .. })
                | Err(FlowError::SupportViolation { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let (samples, flagged) = collect_samples(results)?;
    let tolerance = 1e-2 + (optimal_total - d0).abs();
    Ok(GapReport::from_samples(optimal_total, samples, flagged, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    fn line(lo: f64, hi: f64, n: usize) -> Grid {
        Grid::uniform_1d(lo, hi, n).unwrap()
    }

    fn pair(grid: &Grid, a: (f64, f64), b: (f64, f64)) -> ProductState {
        ProductState::new(
            GridDensity::gaussian(grid, &[a.0], a.1).unwrap(),
            GridDensity::gaussian(grid, &[b.0], b.1).unwrap(),
        )
        .unwrap()
    }

    fn mixture_pair(grid: &Grid, rng: &mut ChaCha8Rng) -> ProductState {
        let mut one = || {
            let params: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (rng.random_range(0.1..1.0), rng.random_range(-2.0..2.0), rng.random_range(0.3..2.0)))
                .collect();
            GridDensity::from_fn(grid, |x| {
                params
                    .iter()
                    .chain([(0.05, 0.0, 4.0)].iter())
                    .map(|(w, m, v)| w * (-(x[0] - m).powi(2) / (2.0 * v)).exp() / v.sqrt())
                    .sum()
            })
            .unwrap()
        };
        let a = one();
        let b = one();
        ProductState::new(a, b).unwrap()
    }

    #[test]
    fn tridiagonal_solver_matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1usize, 2, 3, 7, 40] {
            let mut lower: Vec<f64> = (0..n.saturating_sub(1)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut diag: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut upper: Vec<f64> = (0..n.saturating_sub(1)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dense = DMatrix::zeros(n, n);
            for i in 0..n {
                dense[(i, i)] = diag[i];
                if i + 1 < n {
                    dense[(i, i + 1)] = upper[i];
                    dense[(i + 1, i)] = lower[i];
                }
            }
            let expected = dense.lu().solve(&DVector::from_vec(rhs.clone())).unwrap();
            let mut x = rhs;
            assert!(solve_tridiagonal(&mut lower, &mut diag, &mut upper, &mut x));
            for i in 0..n {
                assert!((x[i] - expected[i]).abs() < 1e-9 * expected.amax().max(1.0), "n={n}");
            }
        }
    }

    #[test]
    fn split_is_stable_at_extremes() {
        for u in [-700.0, -30.0, 0.0, 30.0, 700.0] {
            let (t, r, w) = split(2.0, u);
            assert!(t.is_finite() && r.is_finite() && w.is_finite());
            assert!(((t + r) - 2.0).abs() < 1e-15);
        }
        let (t, r, _) = split(1.0, 0.0);
        assert_eq!((t, r), (0.5, 0.5));
    }

    #[test]
    fn shared_flux_examples() {
        let grid = line(-12.0, 12.0, 2401);
        let same = pair(&grid, (0.0, 1.0), (0.0, 1.0));
        assert!(shared_flux(&same).unwrap().max_abs() < 1e-12);

        let state = pair(&grid, (1.0, 1.0), (0.0, 1.0));
        let flux = shared_flux(&state).unwrap();
        let t = state.tilde().values();
        grid.for_each_face(0, |f, lo, hi| {
            let x = 0.5 * (grid.point(lo)[0] + grid.point(hi)[0]);
            if x.abs() < 8.0 {
                let face_tilde = 0.5 * (t[lo] + t[hi]);
                assert!((flux.faces[0][f] - face_tilde).abs() < 1e-3);
            }
        });
    }

    #[test]
    fn flux_forms_agree_on_random_pairs() {
        let grid = line(-6.0, 6.0, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let state = mixture_pair(&grid, &mut rng);
            let shared = shared_flux(&state).unwrap();
            let (log_form, ratio_form) = flux_forms(&state).unwrap();
            for f in 0..grid.face_count(0) {
                let j = shared.faces[0][f];
                let scale = j.abs().max(1e-300);
                assert!((log_form.faces[0][f] - j).abs() <= 1e-8 * scale);
                assert!((ratio_form.faces[0][f] - j).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn explicit_step_structure() {
        let grid = line(-5.0, 5.0, 100);
        let same = pair(&grid, (0.3, 0.8), (0.3, 0.8));
        let next = product_step(&same, 1e-4).unwrap();
        assert!(next.tilde().max_abs_diff(same.tilde()) < 1e-12);

        let state = pair(&grid, (0.5, 1.0), (-0.5, 1.0));
        let dt = 0.9 / product_stability_ratio(&state, 1.0);
        let next = product_step(&state, dt).unwrap();
        let before = state.sum_field();
        let after = next.sum_field();
        for i in 0..grid.len() {
            assert!((after[i] - before[i]).abs() < 1e-14);
            let dt_tilde = next.tilde().values()[i] - state.tilde().values()[i];
            let dt_rho = next.rho().values()[i] - state.rho().values()[i];
            assert!((dt_tilde + dt_rho).abs() < 1e-14);
        }
        assert!(next.divergence().unwrap() < state.divergence().unwrap());
        assert!(product_step(&state, 2.0 * dt).is_err());
    }

    #[test]
    fn implicit_step_structure_and_consistency() {
        let grid = line(-6.0, 6.0, 240);
        let state = pair(&grid, (0.5, 1.0), (-0.5, 1.0));
        let dt = 0.5 / product_stability_ratio(&state, 1.0);
        let step = implicit_product_step(&state, dt, None).unwrap();
        let next = &step.state;
        let before = state.sum_field();
        let after = next.sum_field();
        for i in 0..grid.len() {
            assert!((after[i] - before[i]).abs() < 1e-15);
        }
        // Backward and forward Euler agree to O(dt²) for a small step.
        let explicit = product_step(&state, dt).unwrap();
        let change = explicit.tilde().max_abs_diff(state.tilde());
        assert!(explicit.tilde().max_abs_diff(next.tilde()) < 1e-2 * change);
        assert!(next.divergence().unwrap() < state.divergence().unwrap());

        let same = pair(&grid, (0.0, 1.0), (0.0, 1.0));
        let fixed = implicit_product_step(&same, 0.1, None).unwrap();
        assert!(fixed.state.tilde().max_abs_diff(same.tilde()) < 1e-12);

        // Large steps stay well defined.
        let big = implicit_product_step(&state, 1.0, None).unwrap();
        assert!(big.state.divergence().unwrap() < state.divergence().unwrap());
    }

    #[test]
    fn reff_examples() {
        let grid = line(-12.0, 12.0, 2401);
        let same = pair(&grid, (0.0, 1.0), (0.0, 1.0));
        assert_eq!(reff_rate(&same).unwrap().combined, 0.0);

        let state = pair(&grid, (1.0, 1.0), (0.0, 1.0));
        let rate = reff_rate(&state).unwrap();
        // Oracle: ∫‖∇log r‖²ρ̃ = 1 and ∫(ρ̃/ρ)ρ̃ = ∫e^{2x−1}φ(x)dx = e.
        let oracle: f64 = {
            let h = 1e-3;
            (0..24_000)
                .map(|k| {
                    let x = -12.0 + (k as f64 + 0.5) * h;
                    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    (2.0 * x - 1.0).exp() * phi * h
                })
                .sum()
        };
        assert!((oracle - E).abs() < 1e-9);
        assert!((rate.combined + 1.0 + E).abs() < 1e-3, "{rate:?}");
        assert!(rate.relative_mismatch() < 1e-6);
    }

    #[test]
    fn reff_dominates_fisher_on_random_pairs() {
        let grid = line(-6.0, 6.0, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let state = mixture_pair(&grid, &mut rng);
            let rate = reff_rate(&state).unwrap();
            assert!(rate.combined <= -state.fisher().unwrap());
            assert!(rate.relative_mismatch() < 1e-6);
        }
    }

    #[test]
    fn pt_rate_examples() {
        let grid = line(-12.0, 12.0, 2401);
        let state = pair(&grid, (1.0, 1.0), (0.0, 1.0));
        let v = VelocityField::from_fn(&grid, |x| vec![x[0].sin()]).unwrap();
        assert_eq!(pt_rate(&state, &v, &v).unwrap(), 0.0);
        let (vt, vr) = optimal_velocities(&state).unwrap();
        let pt = pt_rate(&state, &vt, &vr).unwrap();
        let reff = reff_rate(&state).unwrap().combined;
        assert!((pt - reff).abs() <= 1e-6 * reff.abs());
    }

    #[test]
    fn frozen_pair_action() {
        let grid = line(-12.0, 12.0, 2401);
        let state = pair(&grid, (1.0, 1.0), (0.0, 1.0));
        let n = 10;
        let path = vec![state.clone(); n + 1];
        let zero = vec![VelocityField::zeros(&grid); n + 1];
        let times: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
        let cost = product_action(&path, &zero, &zero, &times).unwrap();
        assert!((cost.running - 0.5 * (1.0 + E)).abs() < 2e-2);
        assert!((cost.terminal - 0.5).abs() < 1e-5);

        let same = pair(&grid, (0.0, 1.0), (0.0, 1.0));
        let path = vec![same; n + 1];
        let cost = product_action(&path, &zero, &zero, &times).unwrap();
        assert!(cost.total.abs() < 1e-8);
    }

    #[test]
    fn run_action_matches_path_action() {
        let grid = line(-5.0, 5.0, 120);
        let state = pair(&grid, (-0.5, 0.6), (0.5, 0.6));
        let mut config = ProductRunConfig::new(0.05, 0.01);
        config.keep_path = true;
        let run = product_flow_run_with(&state, &config).unwrap();
        let path = run.path.as_ref().unwrap();
        let states: Vec<ProductState> = path.iter().map(|(_, s)| s.clone()).collect();
        let times: Vec<f64> = path.iter().map(|(t, _)| *t).collect();
        let (vt, vr): (Vec<_>, Vec<_>) = states.iter().map(|s| optimal_velocities(s).unwrap()).unzip();
        let cost = product_action(&states, &vt, &vr, &times).unwrap();
        let report = run.report.action();
        assert!((cost.running - report.running).abs() <= 1e-10 * report.running);
        assert_eq!(cost.terminal, report.terminal);
    }

    #[test]
    fn run_is_lyapunov_conservative_and_converges() {
        let grid = line(-5.0, 5.0, 200);
        let state = pair(&grid, (-0.5, 0.6), (0.5, 0.6));
        let run = product_flow_run(&state, 50.0, 1.0).unwrap();
        let r = &run.report;
        assert!(r.fisher_stop);
        assert!(r.divergence_series.windows(2).all(|w| w[1] <= w[0] + LYAPUNOV_SLACK));
        assert!(r.sum_drift_series.iter().all(|d| *d <= 1e-12));
        assert!(r.mass_series.iter().chain(&r.mass_tilde_series).all(|m| (m - 1.0).abs() < 1e-12));
        let last = run.snapshots.last().unwrap();
        let bary = state.barycenter().unwrap();
        assert!(last.tilde().max_abs_diff(&bary) < 5e-3);
        assert!(last.rho().max_abs_diff(&bary) < 5e-3);
        let total = r.action().total;
        let d0 = state.divergence().unwrap();
        assert!((total - d0).abs() < 2e-2, "{total} vs {d0}");
    }

    #[test]
    fn equal_pair_run_is_constant() {
        let grid = line(-5.0, 5.0, 100);
        let state = pair(&grid, (0.0, 1.0), (0.0, 1.0));
        let mut config = ProductRunConfig::new(1.0, 0.1);
        config.fisher_stop = 0.0;
        let run = product_flow_run_with(&state, &config).unwrap();
        for s in &run.snapshots {
            assert!(s.tilde().max_abs_diff(state.tilde()) < 1e-12);
            assert!(s.rho().max_abs_diff(state.rho()) < 1e-12);
        }
    }

    #[test]
    fn explicit_run_in_2d() {
        let grid = Grid::new(vec![-4.0, -4.0], vec![4.0, 4.0], vec![32, 32]).unwrap();
        let state = ProductState::new(
            GridDensity::gaussian(&grid, &[-0.5, 0.0], 1.0).unwrap(),
            GridDensity::gaussian(&grid, &[0.5, 0.0], 1.0).unwrap(),
        )
        .unwrap();
        let run = product_flow_run(&state, 0.2, 0.01).unwrap();
        let r = &run.report;
        assert!(r.divergence_series.windows(2).all(|w| w[1] <= w[0] + LYAPUNOV_SLACK));
        assert!(r.sum_drift_series.iter().all(|d| *d <= 1e-12));
        assert!(*r.divergence_series.last().unwrap() < 0.5 * r.divergence_series[0]);
    }

    #[test]
    fn zero_magnitude_gap_is_exactly_zero() {
        let grid = line(-5.0, 5.0, 100);
        let state = pair(&grid, (-0.5, 0.6), (0.5, 0.6));
        let report = optimality_gap_product(&state, 0.05, 0.01, 3, 0.0, 1).unwrap();
        assert_eq!(report.gap, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn explicit_step_is_antisymmetric(seed in 0u64..1000) {
            let grid = line(-6.0, 6.0, 120);
            let state = mixture_pair(&grid, &mut ChaCha8Rng::seed_from_u64(seed));
            let dt = 0.9 / product_stability_ratio(&state, 1.0);
            let next = product_step(&state, dt).unwrap();
            for i in 0..grid.len() {
                let a = next.tilde().values()[i] - state.tilde().values()[i];
                let b = next.rho().values()[i] - state.rho().values()[i];
                prop_assert!((a + b).abs() <= 1e-15);
            }
            prop_assert!((next.tilde().mass() - 1.0).abs() < 1e-12);
            prop_assert!(next.divergence().unwrap() <= state.divergence().unwrap() + LYAPUNOV_SLACK);
        }
    }
}
