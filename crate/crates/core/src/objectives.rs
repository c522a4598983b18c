//! Differentiable objectives on ℝⁿ, physical potentials, and the Boltzmann
//! density of a potential on a truncated grid.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::density::{Grid, GridDensity};
use crate::error::{FlowError, Result};

/// A scalar field on ℝⁿ with an analytic gradient and, optionally, a Hessian.
pub trait Objective: Send + Sync + fmt::Debug {
    fn dimension(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    /// Symmetric Hessian at `x`, when the objective provides one.
    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// `f(x) = ½ (x − c)ᵀ A (x − c)` with `A` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    matrix: DMatrix<f64>,
    center: DVector<f64>,
}

/// Builds the quadratic `½ (x − center)ᵀ A (x − center)`.
///
/// The matrix is rejected when it is not square, not symmetric (to 1e-12
/// relative), or not positive definite; the error names the failed check.
pub fn make_quadratic(matrix: DMatrix<f64>, center: &[f64]) -> Result<Quadratic> {
    let n = matrix.nrows();
    if n == 0 || matrix.ncols() != n {
        return Err(FlowError::InvalidMatrix {
            check: format!("square: matrix is {}x{}", matrix.nrows(), matrix.ncols()),
        });
    }
    if center.len() != n {
        return Err(FlowError::DimensionMismatch {
            expected: n,
            got: center.len(),
        });
    }
    if matrix.iter().chain(center).any(|v| !v.is_finite()) {
        return Err(FlowError::InvalidMatrix {
            check: "finite: matrix or center has non-finite entries".into(),
        });
    }
    let scale = matrix.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                return Err(FlowError::InvalidMatrix {
                    check: format!("symmetric: entry ({i},{j}) differs from ({j},{i})"),
                });
            }
        }
    }
    let min_eig = matrix.clone().symmetric_eigen().eigenvalues.min();
    if min_eig <= 0.0 {
        return Err(FlowError::InvalidMatrix {
            check: format!("positive definite: smallest eigenvalue {min_eig:e}"),
        });
    }
    Ok(Quadratic {
        matrix,
        center: DVector::from_column_slice(center),
    })
}

impl Quadratic {
    /// Diagonal quadratic centered at the origin.
    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let center = vec![0.0; diag.len()];
        make_quadratic(DMatrix::from_diagonal(&DVector::from_column_slice(diag)), &center)
    }

    /// Quadratic from a row-major matrix; ragged rows are rejected as
    /// non-square.
    pub fn from_rows(rows: &[Vec<f64>], center: &[f64]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(FlowError::InvalidMatrix {
                check: "square: rows have unequal lengths".into(),
            });
        }
        make_quadratic(DMatrix::from_fn(n, n, |i, j| rows[i][j]), center)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn center(&self) -> &[f64] {
        self.center.as_slice()
    }

    fn offset(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x) - &self.center
    }
}

impl Objective for Quadratic {
    fn dimension(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = self.offset(x);
        0.5 * d.dot(&(&self.matrix * &d))
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = self.offset(x);
        (&self.matrix * d).as_slice().to_vec()
    }

    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.matrix.clone())
    }
}

/// One-dimensional double well `H(x) = (x² − 1)² / 4`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleWell;

impl Objective for DoubleWell {
    fn dimension(&self) -> usize {
        1
    }

    fn value(&self, x: &[f64]) -> f64 {
        let s = x[0] * x[0] - 1.0;
        0.25 * s * s
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0] * (x[0] * x[0] - 1.0)]
    }

    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 3.0 * x[0] * x[0] - 1.0))
    }
}

/// Affine function `a·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl Objective for Linear {
    fn dimension(&self) -> usize {
        self.slope.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.offset + self.slope.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.slope.clone()
    }

    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.slope.len();
        Some(DMatrix::zeros(n, n))
    }
}

/// Maximum relative error between the analytic gradient and central
/// differences of `value` with the given step.
pub fn gradient_fd_error(objective: &dyn Objective, x: &[f64], step: f64) -> f64 {
    let g = objective.gradient(x);
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        xp[k] = x[k] + step;
        let fp = objective.value(&xp);
        xp[k] = x[k] - step;
        let fm = objective.value(&xp);
        xp[k] = x[k];
        let fd = (fp - fm) / (2.0 * step);
        let scale = g[k].abs().max(fd.abs()).max(1.0);
        worst = worst.max((fd - g[k]).abs() / scale);
    }
    worst
}

/// Maximum relative error between the analytic Hessian and central
/// differences of the gradient. `None` when the objective has no Hessian.
pub fn hessian_fd_error(objective: &dyn Objective, x: &[f64], step: f64) -> Option<f64> {
    let h = objective.hessian(x)?;
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        xp[k] = x[k] + step;
        let gp = objective.gradient(&xp);
        xp[k] = x[k] - step;
        let gm = objective.gradient(&xp);
        xp[k] = x[k];
        for i in 0..x.len() {
            let fd = (gp[i] - gm[i]) / (2.0 * step);
            let scale = h[(i, k)].abs().max(fd.abs()).max(1.0);
            worst = worst.max((fd - h[(i, k)]).abs() / scale);
        }
    }
    Some(worst)
}

/// A Hamiltonian together with the thermal energy `kT`.
#[derive(Debug, Clone)]
pub struct Potential {
    hamiltonian: Arc<dyn Objective>,
    kt: f64,
}

impl Potential {
    pub fn new(hamiltonian: Arc<dyn Objective>, kt: f64) -> Result<Self> {
        if !(kt.is_finite() && kt > 0.0) {
            return Err(FlowError::InvalidParameter {
                name: "kT",
                reason: format!("must be positive and finite, got {kt}"),
            });
        }
        Ok(Self { hamiltonian, kt })
    }

    /// Convenience constructor for `kT = 1`.
    pub fn unit(hamiltonian: impl Objective + 'static) -> Self {
        Self {
            hamiltonian: Arc::new(hamiltonian),
            kt: 1.0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.hamiltonian.dimension()
    }

    pub fn kt(&self) -> f64 {
        self.kt
    }

    pub fn hamiltonian(&self) -> &dyn Objective {
        self.hamiltonian.as_ref()
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        self.hamiltonian.value(x)
    }

    /// `H/kT` sampled at every grid node.
    pub fn scaled_energy_on(&self, grid: &Grid) -> Result<Vec<f64>> {
        if grid.dimension() != self.dimension() {
            return Err(FlowError::DimensionMismatch {
                expected: grid.dimension(),
                got: self.dimension(),
            });
        }
        Ok((0..grid.len())
            .map(|i| self.energy(&grid.point(i)) / self.kt)
            .collect())
    }
}

fn shifted_boltzmann_weights(pot: &Potential, grid: &Grid) -> Result<(Vec<f64>, f64)> {
    let scaled = pot.scaled_energy_on(grid)?;
    if scaled.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(FlowError::NormalizationOverflow {
            min_scaled: f64::NEG_INFINITY,
        });
    }
    let min = scaled.iter().copied().fold(f64::INFINITY, f64::min);
    if min == f64::INFINITY {
        return Err(FlowError::ZeroNormalization);
    }
    if min < -700.0 {
        return Err(FlowError::NormalizationOverflow { min_scaled: min });
    }
    let weights = scaled.iter().map(|v| (min - v).exp()).collect();
    Ok((weights, min))
}

/// `log Z` for `Z = Σ exp(−H/kT)·dV` over the grid (midpoint rule).
pub fn log_partition(pot: &Potential, grid: &Grid) -> Result<f64> {
    let (weights, min) = shifted_boltzmann_weights(pot, grid)?;
    let z = grid.integrate(&weights);
    if z <= 0.0 {
        return Err(FlowError::ZeroNormalization);
    }
    Ok(z.ln() - min)
}

/// The Boltzmann density `Z⁻¹ exp(−H/kT)` on the truncated grid.
///
/// `Z` is the midpoint-rule sum over the grid, computed after subtracting the
/// minimum of `H/kT` so stiff potentials do not overflow.
pub fn boltzmann_density(pot: &Potential, grid: &Grid) -> Result<GridDensity> {
    let (weights, _) = shifted_boltzmann_weights(pot, grid)?;
    let z = grid.integrate(&weights);
    if z <= 0.0 || !z.is_finite() {
        return Err(FlowError::ZeroNormalization);
    }
    let values = weights.into_iter().map(|w| w / z).collect();
    GridDensity::new(grid.clone(), values)
}
