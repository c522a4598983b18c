//! Gradient flows in ℝⁿ and on Wasserstein space, with the action
//! functionals that certify each flow as an optimal controlled evolution.
//!
//! * [`objectives`]: objective functions, potentials and Boltzmann densities.
//! * [`euclidean`]: gradient, Newton and projected (SGD) flows in ℝⁿ.
//! * [`density`]: grid densities and the entropy-type functionals.
//! * [`wasserstein`]: the Fokker–Planck flow and its fluid-dynamic action.
//! * [`product`]: the coupled flow of a density pair toward its barycenter.

pub mod density;
pub mod error;
pub mod euclidean;
pub mod objectives;
pub mod perturb;
pub mod product;
pub mod wasserstein;

/// The matrix types in the public API come from this crate version.
pub use nalgebra;
pub use density::{Grid, GridDensity, VelocityField};
pub use error::{FlowError, Result};
pub use objectives::{make_quadratic, DoubleWell, Linear, Objective, Potential, Quadratic};

use serde::{Deserialize, Serialize};

/// An action split into its running and terminal parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountedCost {
    pub running: f64,
    pub terminal: f64,
    pub total: f64,
}

impl AccountedCost {
    pub fn new(running: f64, terminal: f64) -> Self {
        Self {
            running,
            terminal,
            total: running + terminal,
        }
    }
}

/// One point of a dissipation comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DissipationPoint {
    pub t: f64,
    /// Finite-difference rate of the tracked functional.
    pub lhs: f64,
    /// Predicted rate.
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipationSeries {
    pub points: Vec<DissipationPoint>,
    /// `max |lhs − rhs|` over the compared points.
    pub max_mismatch: f64,
    /// `max_mismatch` divided by the step to the power of the difference
    /// scheme's order, i.e. the constant in the error bound.
    pub constant: f64,
}

/// Outcome of a perturbation study around an optimal evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub optimal_total: f64,
    /// Total cost of every sample, in sample order. Diverged samples are `+∞`.
    pub samples: Vec<f64>,
    pub min_perturbed_total: f64,
    pub gap: f64,
    /// Indices of samples that diverged or broke a step-size condition.
    pub flagged: Vec<usize>,
    /// Slack allowed below zero for `gap`.
    pub tolerance: f64,
}

impl GapReport {
    pub(crate) fn from_samples(optimal_total: f64, samples: Vec<f64>, flagged: Vec<usize>, tolerance: f64) -> Self {
        let min_perturbed_total = samples
            .iter()
            .enumerate()
            .filter(|(i, _)| !flagged.contains(i))
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        let gap = if min_perturbed_total.is_finite() {
            min_perturbed_total - optimal_total
        } else {
            f64::INFINITY
        };
        Self {
            optimal_total,
            samples,
            min_perturbed_total,
            gap,
            flagged,
            tolerance,
        }
    }

    pub fn passes(&self) -> bool {
        self.gap >= -self.tolerance
    }

    /// Median over the samples that were not flagged.
    pub fn median_total(&self) -> f64 {
        let mut kept: Vec<f64> = self
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.flagged.contains(i))
            .map(|(_, v)| *v)
            .collect();
        if kept.is_empty() {
            return f64::NAN;
        }
        kept.sort_by(f64::total_cmp);
        let n = kept.len();
        if n % 2 == 1 {
            kept[n / 2]
        } else {
            0.5 * (kept[n / 2 - 1] + kept[n / 2])
        }
    }
}
