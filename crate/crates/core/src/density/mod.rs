//! Grid densities, velocity fields, and the entropy-type functionals shared
//! by the single and product Wasserstein flows.
//!
//! Logarithms are taken of `max(ρ, DENSITY_FLOOR)` so that Gaussian tails
//! that underflow on wide domains stay finite. Nodes where either density is
//! below the floor are left out of the Fisher-type integrands; the error this
//! introduces is bounded by the mass sitting on those nodes.

mod grid;
pub mod io;

pub use grid::Grid;

use serde::Serialize;

use crate::error::{FlowError, Result};
use crate::objectives::Potential;

/// Densities are floored here before any logarithm or ratio.
pub const DENSITY_FLOOR: f64 = 1e-30;

/// A density above this value where the reference is below the floor breaks
/// absolute continuity and is rejected.
pub const SUPPORT_TOLERANCE: f64 = 1e-12;

/// Rounding slack for nonnegativity: values below `-NEGATIVE_TOLERANCE` abort.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;

/// Number of quantile levels used by [`wasserstein1d`].
pub const QUANTILE_LEVELS: usize = 10_000;

/// A probability density sampled at the nodes of a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl GridDensity {
    /// Wraps nodal values. Values must be finite and not below
    /// `-NEGATIVE_TOLERANCE` (tiny negative round-off is kept as is).
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FlowError::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(FlowError::InvalidParameter {
                name: "density",
                reason: format!("non-finite value at node {node}"),
            });
        }
        if let Some((node, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| **v < -NEGATIVE_TOLERANCE)
        {
            return Err(FlowError::NegativeDensity { node, value });
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every node and rescales to unit mass.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        Self::new(grid.clone(), values)?.normalized()
    }

    /// Isotropic Gaussian `N(mean, variance·I)` sampled on the grid and
    /// normalized by quadrature.
    pub fn gaussian(grid: &Grid, mean: &[f64], variance: f64) -> Result<Self> {
        if mean.len() != grid.dimension() {
            return Err(FlowError::DimensionMismatch {
                expected: grid.dimension(),
                got: mean.len(),
            });
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(FlowError::InvalidParameter {
                name: "variance",
                reason: format!("must be positive, got {variance}"),
            });
        }
        Self::from_fn(grid, |x| {
            let r2: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
            (-0.5 * r2 / variance).exp()
        })
    }

    /// Rescaled copy with unit mass.
    pub fn normalized(self) -> Result<Self> {
        let mass = self.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(FlowError::ZeroNormalization);
        }
        let values = self.values.iter().map(|v| v / mass).collect();
        Ok(Self {
            grid: self.grid,
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Mean position, one entry per axis.
    pub fn mean(&self) -> Vec<f64> {
        let mass = self.mass();
        (0..self.grid.dimension())
            .map(|a| {
                self.values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| self.grid.coordinate(a, self.grid.axis_index(i, a)) * v)
                    .sum::<f64>()
                    * self.grid.cell_volume()
                    / mass
            })
            .collect()
    }

    /// Per-axis variance.
    pub fn variance(&self) -> Vec<f64> {
        let mass = self.mass();
        let mean = self.mean();
        (0..self.grid.dimension())
            .map(|a| {
                self.values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let d = self.grid.coordinate(a, self.grid.axis_index(i, a)) - mean[a];
                        d * d * v
                    })
                    .sum::<f64>()
                    * self.grid.cell_volume()
                    / mass
            })
            .collect()
    }

    /// Max-norm distance between nodal values.
    pub fn max_abs_diff(&self, other: &GridDensity) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn ensure_same_grid(&self, other: &GridDensity) -> Result<()> {
        if self.grid != other.grid {
            return Err(FlowError::GridMismatch);
        }
        Ok(())
    }
}

/// A vector field sampled at the nodes of a [`Grid`], one component vector
/// per axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityField {
    grid: Grid,
    components: Vec<Vec<f64>>,
}

impl VelocityField {
    pub fn new(grid: Grid, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != grid.dimension() {
            return Err(FlowError::DimensionMismatch {
                expected: grid.dimension(),
                got: components.len(),
            });
        }
        for c in &components {
            if c.len() != grid.len() {
                return Err(FlowError::DimensionMismatch {
                    expected: grid.len(),
                    got: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::InvalidParameter {
                    name: "velocity",
                    reason: "non-finite component".into(),
                });
            }
        }
        Ok(Self { grid, components })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            components: vec![vec![0.0; grid.len()]; grid.dimension()],
        }
    }

    /// Samples `f` (returning one value per axis) at every node.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut components = vec![vec![0.0; grid.len()]; grid.dimension()];
        for i in 0..grid.len() {
            let v = f(&grid.point(i));
            for (a, c) in components.iter_mut().enumerate() {
                c[i] = v[a];
            }
        }
        Self::new(grid.clone(), components)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// `‖v‖²` at node `i`.
    pub fn norm_sq(&self, i: usize) -> f64 {
        self.components.iter().map(|c| c[i] * c[i]).sum()
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| self.norm_sq(i).sqrt())
            .fold(0.0, f64::max)
    }

    /// `self + factor·other`.
    pub fn add_scaled(&self, factor: f64, other: &VelocityField) -> Result<Self> {
        if self.grid != other.grid {
            return Err(FlowError::GridMismatch);
        }
        let components = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + factor * y).collect())
            .collect();
        Ok(Self {
            grid: self.grid.clone(),
            components,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            components: self
                .components
                .iter()
                .map(|c| c.iter().map(|v| factor * v).collect())
                .collect(),
        }
    }

    /// Multiplies every component at node `i` by `weights[i]`.
    pub fn weighted(&self, weights: &[f64]) -> Self {
        Self {
            grid: self.grid.clone(),
            components: self
                .components
                .iter()
                .map(|c| c.iter().zip(weights).map(|(v, w)| v * w).collect())
                .collect(),
        }
    }

    /// Pointwise dot product with another field on the same grid.
    pub fn dot(&self, other: &VelocityField, i: usize) -> f64 {
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a[i] * b[i])
            .sum()
    }

    pub(crate) fn from_gradient(grid: &Grid, values: &[f64]) -> Self {
        Self {
            grid: grid.clone(),
            components: grid.gradient(values),
        }
    }
}

fn floored_ln(v: f64) -> f64 {
    v.max(DENSITY_FLOOR).ln()
}

/// Gibbs entropy `−∫ ρ log ρ` (Boltzmann constant 1).
pub fn entropy(rho: &GridDensity) -> f64 {
    let integrand: Vec<f64> = rho
        .values
        .iter()
        .map(|&v| if v > 0.0 { -v * floored_ln(v) } else { 0.0 })
        .collect();
    rho.grid.integrate(&integrand)
}

/// Free energy `F = U − T·S = ∫ Hρ + kT ∫ ρ log ρ`.
pub fn free_energy(rho: &GridDensity, pot: &Potential) -> Result<f64> {
    let h = pot.scaled_energy_on(&rho.grid)?;
    let internal: Vec<f64> = h
        .iter()
        .zip(&rho.values)
        .map(|(e, v)| e * pot.kt() * v)
        .collect();
    Ok(rho.grid.integrate(&internal) - pot.kt() * entropy(rho))
}

/// Rejects `ρ̃ > SUPPORT_TOLERANCE` where `ρ ≤ DENSITY_FLOOR`.
pub fn check_support(tilde: &GridDensity, rho: &GridDensity) -> Result<()> {
    tilde.ensure_same_grid(rho)?;
    match tilde
        .values
        .iter()
        .zip(&rho.values)
        .position(|(&a, &b)| a > SUPPORT_TOLERANCE && b <= DENSITY_FLOOR)
    {
        Some(node) => Err(FlowError::SupportViolation {
            node,
            value: tilde.values[node],
        }),
        None => Ok(()),
    }
}

/// Nodal `log(ρ̃/ρ)` with both densities floored.
pub fn log_ratio(tilde: &GridDensity, rho: &GridDensity) -> Vec<f64> {
    log_ratio_values(&tilde.values, &rho.values)
}

pub(crate) fn log_ratio_values(tilde: &[f64], rho: &[f64]) -> Vec<f64> {
    tilde
        .iter()
        .zip(rho)
        .map(|(&a, &b)| floored_ln(a) - floored_ln(b))
        .collect()
}

/// Nodes that carry both densities above the floor.
pub fn active_nodes(tilde: &GridDensity, rho: &GridDensity) -> Vec<bool> {
    active_values(&tilde.values, &rho.values)
}

pub(crate) fn active_values(tilde: &[f64], rho: &[f64]) -> Vec<bool> {
    tilde
        .iter()
        .zip(rho)
        .map(|(&a, &b)| a > DENSITY_FLOOR && b > DENSITY_FLOOR)
        .collect()
}

/// True when the floor is active on more than 1% of the nodes where either
/// density carries mass (exceeds `SUPPORT_TOLERANCE`).
pub fn floor_flagged(rho: &GridDensity, reference: &GridDensity) -> bool {
    let mut carrying = 0usize;
    let mut floored = 0usize;
    for (&a, &b) in rho.values.iter().zip(&reference.values) {
        if a > SUPPORT_TOLERANCE || b > SUPPORT_TOLERANCE {
            carrying += 1;
            if a <= DENSITY_FLOOR || b <= DENSITY_FLOOR {
                floored += 1;
            }
        }
    }
    carrying > 0 && floored * 100 > carrying
}

/// Relative entropy `D(ρ̃‖ρ) = ∫ log(ρ̃/ρ) ρ̃`.
pub fn relative_entropy(tilde: &GridDensity, rho: &GridDensity) -> Result<f64> {
    check_support(tilde, rho)?;
    let integrand: Vec<f64> = tilde
        .values
        .iter()
        .zip(&rho.values)
        .map(|(&a, &b)| {
            if a > 0.0 {
                a * (floored_ln(a) - floored_ln(b))
            } else {
                0.0
            }
        })
        .collect();
    Ok(tilde.grid.integrate(&integrand))
}

/// Wasserstein gradient of `D(·‖ρ̄)` at `ρ`: the field `∇ log(ρ/ρ̄)`.
pub fn wasserstein_gradient_single(
    rho: &GridDensity,
    reference: &GridDensity,
) -> Result<VelocityField> {
    rho.ensure_same_grid(reference)?;
    Ok(VelocityField::from_gradient(
        &rho.grid,
        &log_ratio(rho, reference),
    ))
}

/// Both components of the product-space gradient of `D(ρ̃‖ρ)`:
/// `(∇ log(ρ̃/ρ), −∇(ρ̃/ρ))`.
///
/// The second component is formed as `−(ρ̃/ρ)·∇ log(ρ̃/ρ)`, i.e. the chain
/// rule is applied before discretizing. This keeps `ρ̃·first = −ρ·second`
/// exact at every node where neither density is floored.
pub fn wasserstein_gradient_pair(
    tilde: &GridDensity,
    rho: &GridDensity,
) -> Result<(VelocityField, VelocityField)> {
    tilde.ensure_same_grid(rho)?;
    let lr = log_ratio(tilde, rho);
    let first = VelocityField::from_gradient(&tilde.grid, &lr);
    let ratio: Vec<f64> = lr.iter().map(|v| -v.exp()).collect();
    let second = first.weighted(&ratio);
    Ok((first, second))
}

/// Relative Fisher information `∫ ‖∇ log(ρ̃/ρ)‖² ρ̃`.
pub fn relative_fisher(tilde: &GridDensity, rho: &GridDensity) -> Result<f64> {
    check_support(tilde, rho)?;
    let grad = VelocityField::from_gradient(&tilde.grid, &log_ratio(tilde, rho));
    let active = active_nodes(tilde, rho);
    let integrand: Vec<f64> = (0..tilde.grid.len())
        .map(|i| {
            if active[i] {
                grad.norm_sq(i) * tilde.values[i]
            } else {
                0.0
            }
        })
        .collect();
    Ok(tilde.grid.integrate(&integrand))
}

/// Quadratic Wasserstein distance between two 1D densities by quantile
/// coupling.
///
/// Each density is treated as constant on its cells, so its CDF is piecewise
/// linear and the inverse CDF is exact. The squared difference of the two
/// inverse CDFs is averaged over `QUANTILE_LEVELS` midpoint levels.
pub fn wasserstein1d(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    for d in [a, b] {
        if d.grid.dimension() != 1 {
            return Err(FlowError::NotOneDimensional(d.grid.dimension()));
        }
    }
    let qa = quantiles(a);
    let qb = quantiles(b);
    let sum: f64 = qa.iter().zip(&qb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / QUANTILE_LEVELS as f64).sqrt())
}

fn quantiles(d: &GridDensity) -> Vec<f64> {
    let h = d.grid.spacing(0);
    let lower = d.grid.lower()[0];
    let masses: Vec<f64> = d.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = masses.iter().sum();
    let mut out = Vec::with_capacity(QUANTILE_LEVELS);
    let mut cell = 0;
    let mut below = 0.0;
    for k in 0..QUANTILE_LEVELS {
        let q = (k as f64 + 0.5) / QUANTILE_LEVELS as f64 * total;
        while cell + 1 < masses.len() && below + masses[cell] <= q {
            below += masses[cell];
            cell += 1;
        }
        let frac = if masses[cell] > 0.0 {
            ((q - below) / masses[cell]).clamp(0.0, 1.0)
        } else {
            0.5
        };
        out.push(lower + (cell as f64 + frac) * h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{boltzmann_density, log_partition, Quadratic};
    use proptest::prelude::*;
    use std::f64::consts::{E, LN_2, PI};
    use std::sync::Arc;

    fn line(lo: f64, hi: f64, n: usize) -> Grid {
        Grid::uniform_1d(lo, hi, n).unwrap()
    }

    fn normal(grid: &Grid, m: f64, v: f64) -> GridDensity {
        GridDensity::gaussian(grid, &[m], v).unwrap()
    }

    // Closed-form oracles for Gaussians.
    fn gaussian_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
        0.5 * (v1 / v2 + (m1 - m2).powi(2) / v2 - 1.0 + (v2 / v1).ln())
    }

    #[test]
    fn entropy_examples() {
        let unit = GridDensity::from_fn(&line(0.0, 1.0, 64), |_| 1.0).unwrap();
        assert!(entropy(&unit).abs() < 1e-12);
        let two = GridDensity::from_fn(&line(0.0, 2.0, 64), |_| 1.0).unwrap();
        assert!((entropy(&two) - LN_2).abs() < 1e-9);
        let g = normal(&line(-10.0, 10.0, 2001), 0.0, 1.0);
        let exact = 0.5 * (2.0 * PI * E).ln();
        assert!((entropy(&g) - exact).abs() < 1e-4);
    }

    #[test]
    fn free_energy_of_equilibrium_is_minus_kt_log_z() {
        let grid = line(-10.0, 10.0, 801);
        for kt in [1.0, 2.5] {
            let pot = Potential::new(Arc::new(Quadratic::diagonal(&[1.0]).unwrap()), kt).unwrap();
            let bar = boltzmann_density(&pot, &grid).unwrap();
            let f = free_energy(&bar, &pot).unwrap();
            // Oracle: Z by direct quadrature of exp(-H/kT), no shift.
            let z: f64 = (0..grid.len())
                .map(|i| (-0.5 * grid.point(i)[0].powi(2) / kt).exp())
                .sum::<f64>()
                * grid.spacing(0);
            assert!((f + kt * z.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn free_energy_flat_potential_uniform_density() {
        let grid = line(0.0, 1.0, 32);
        let pot = Potential::unit(crate::objectives::Linear {
            slope: vec![0.0],
            offset: 0.0,
        });
        let rho = GridDensity::from_fn(&grid, |_| 1.0).unwrap();
        assert!(free_energy(&rho, &pot).unwrap().abs() < 1e-12);
    }

    #[test]
    fn divergence_free_energy_relation() {
        let grid = line(-12.0, 12.0, 1201);
        let kt = 1.5;
        let pot = Potential::new(Arc::new(Quadratic::diagonal(&[1.0]).unwrap()), kt).unwrap();
        let bar = boltzmann_density(&pot, &grid).unwrap();
        let rho = normal(&grid, 0.7, 0.6);
        let d = relative_entropy(&rho, &bar).unwrap();
        let f = free_energy(&rho, &pot).unwrap();
        let log_z = log_partition(&pot, &grid).unwrap();
        assert!((d - (f / kt + log_z)).abs() < 1e-6);
    }

    #[test]
    fn relative_entropy_examples() {
        let grid = line(-12.0, 12.0, 2401);
        let p = normal(&grid, 0.0, 1.0);
        assert!(relative_entropy(&p, &p).unwrap().abs() < 1e-12);
        let q = normal(&grid, 1.0, 1.0);
        assert!((relative_entropy(&q, &p).unwrap() - 0.5).abs() < 1e-5);
        let w = normal(&grid, 0.0, 2.0);
        let expected = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((expected - 0.153426).abs() < 1e-6);
        assert!((relative_entropy(&w, &p).unwrap() - expected).abs() < 1e-5);
    }

    #[test]
    fn relative_entropy_rejects_support_violation() {
        let grid = line(0.0, 1.0, 20);
        let tilde = GridDensity::from_fn(&grid, |_| 1.0).unwrap();
        let rho = GridDensity::from_fn(&grid, |x| if x[0] < 0.5 { 1.0 } else { 0.0 }).unwrap();
        match relative_entropy(&tilde, &rho) {
            Err(FlowError::SupportViolation { node, .. }) => assert_eq!(node, 10),
            other => panic!("unexpected {other:?}"),
        }
        // The reverse direction is fine: ρ̃ vanishes where ρ does.
        assert!(relative_entropy(&rho, &tilde).is_ok());
    }

    #[test]
    fn quadrature_converges_at_least_second_order() {
        let mut errors = Vec::new();
        for n in [40, 80, 160] {
            let grid = line(-12.0, 12.0, n);
            let d = relative_entropy(&normal(&grid, 0.0, 2.0), &normal(&grid, 0.0, 1.0)).unwrap();
            let h = entropy(&normal(&grid, 0.0, 1.0));
            errors.push((
                (d - gaussian_kl(0.0, 2.0, 0.0, 1.0)).abs(),
                (h - 0.5 * (2.0 * PI * E).ln()).abs(),
            ));
        }
        for w in errors.windows(2) {
            assert!(w[1].0 <= (w[0].0 / 4.0).max(1e-12), "{errors:?}");
            assert!(w[1].1 <= (w[0].1 / 4.0).max(1e-12), "{errors:?}");
        }
    }

    #[test]
    fn single_gradient_examples() {
        let grid = line(-12.0, 12.0, 2401);
        let p = normal(&grid, 0.0, 1.0);
        let zero = wasserstein_gradient_single(&p, &p).unwrap();
        assert!(zero.max_norm() < 1e-12);

        let shifted = wasserstein_gradient_single(&normal(&grid, 1.0, 1.0), &p).unwrap();
        let wide = wasserstein_gradient_single(&normal(&grid, 0.0, 2.0), &p).unwrap();
        for i in 1..grid.len() - 1 {
            let x = grid.point(i)[0];
            if x.abs() < 8.0 {
                assert!((shifted.component(0)[i] - 1.0).abs() < 1e-4);
                assert!((wide.component(0)[i] - x / 2.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn pair_gradient_examples() {
        let grid = line(-12.0, 12.0, 2401);
        let p = normal(&grid, 0.0, 1.0);
        let (a, b) = wasserstein_gradient_pair(&p, &p).unwrap();
        assert!(a.max_norm() < 1e-12 && b.max_norm() < 1e-12);

        let q = normal(&grid, 1.0, 1.0);
        let (first, second) = wasserstein_gradient_pair(&q, &p).unwrap();
        let active = active_nodes(&q, &p);
        for i in (1..grid.len() - 1).filter(|i| active[*i]) {
            let x = grid.point(i)[0];
            if x.abs() < 6.0 {
                assert!((first.component(0)[i] - 1.0).abs() < 1e-4);
                // d/dx e^{x - 1/2} = e^{x - 1/2}
                let exact = -(x - 0.5).exp();
                assert!((second.component(0)[i] - exact).abs() < 1e-3 * exact.abs().max(1.0));
            }
            let lhs = q.values()[i] * first.component(0)[i];
            let rhs = -p.values()[i] * second.component(0)[i];
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1e-300));
        }
    }

    #[test]
    fn fisher_examples() {
        let grid = line(-12.0, 12.0, 2401);
        let p = normal(&grid, 0.0, 1.0);
        assert_eq!(relative_fisher(&p, &p).unwrap(), 0.0);
        assert!((relative_fisher(&normal(&grid, 1.0, 1.0), &p).unwrap() - 1.0).abs() < 1e-4);
        assert!((relative_fisher(&normal(&grid, 0.0, 2.0), &p).unwrap() - 0.5).abs() < 1e-4);
    }

    #[test]
    fn wasserstein1d_examples() {
        let grid = line(-15.0, 15.0, 3001);
        let a = normal(&grid, -1.0, 1.0);
        assert!(wasserstein1d(&a, &a).unwrap() < 1e-8);
        let b = normal(&grid, 1.0, 1.0);
        assert!((wasserstein1d(&a, &b).unwrap() - 2.0).abs() < 1e-3);
        let c = normal(&grid, 0.0, 1.0);
        let d = normal(&grid, 0.0, 4.0);
        assert!((wasserstein1d(&c, &d).unwrap() - 1.0).abs() < 1e-3);

        let g2 = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![16, 16]).unwrap();
        let flat = GridDensity::from_fn(&g2, |_| 1.0).unwrap();
        assert!(matches!(
            wasserstein1d(&flat, &flat),
            Err(FlowError::NotOneDimensional(2))
        ));
    }

    // Random mixtures share a wide background component so that every pair
    // stays strictly positive on the test grids.
    fn mixture(grid: &Grid, params: &[(f64, f64, f64)]) -> GridDensity {
        GridDensity::from_fn(grid, |x| {
            params
                .iter()
                .chain([(0.05, 0.0, 4.0)].iter())
                .map(|(w, m, v)| w * (-(x[0] - m).powi(2) / (2.0 * v)).exp() / v.sqrt())
                .sum()
        })
        .unwrap()
    }

    fn component() -> impl Strategy<Value = (f64, f64, f64)> {
        (0.1f64..1.0, -2.0f64..2.0, 0.3f64..2.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn divergence_and_fisher_nonnegative(
            a in prop::collection::vec(component(), 1..4),
            b in prop::collection::vec(component(), 1..4),
        ) {
            let grid = line(-10.0, 10.0, 400);
            let p = mixture(&grid, &a);
            let q = mixture(&grid, &b);
            let d = relative_entropy(&p, &q).unwrap();
            prop_assert!(d >= -1e-10);
            if p.max_abs_diff(&q) > 1e-9 {
                prop_assert!(d > 1e-10 || p.max_abs_diff(&q) < 1e-4);
            }
            prop_assert!(relative_entropy(&p, &p).unwrap().abs() <= 1e-10);
            prop_assert!(relative_fisher(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn flux_forms_agree_nodewise(
            a in prop::collection::vec(component(), 1..4),
            b in prop::collection::vec(component(), 1..4),
        ) {
            let grid = line(-6.0, 6.0, 300);
            let p = mixture(&grid, &a);
            let q = mixture(&grid, &b);
            let (first, second) = wasserstein_gradient_pair(&p, &q).unwrap();
            for i in 1..grid.len() - 1 {
                let lhs = p.values()[i] * first.component(0)[i];
                let rhs = -q.values()[i] * second.component(0)[i];
                prop_assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()).max(1e-300));
            }
        }

        #[test]
        fn wasserstein1d_is_a_metric(
            a in prop::collection::vec(component(), 1..3),
            b in prop::collection::vec(component(), 1..3),
            c in prop::collection::vec(component(), 1..3),
        ) {
            let grid = line(-10.0, 10.0, 400);
            let (p, q, r) = (mixture(&grid, &a), mixture(&grid, &b), mixture(&grid, &c));
            let pq = wasserstein1d(&p, &q).unwrap();
            let qp = wasserstein1d(&q, &p).unwrap();
            prop_assert!((pq - qp).abs() <= 1e-6);
            let pr = wasserstein1d(&p, &r).unwrap();
            let rq = wasserstein1d(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-6);
        }
    }

    #[test]
    fn fisher_zero_iff_gradient_zero() {
        let grid = line(-8.0, 8.0, 200);
        let p = mixture(&grid, &[(1.0, 0.0, 1.0), (0.5, 2.0, 0.5)]);
        let grad = wasserstein_gradient_single(&p, &p).unwrap();
        assert_eq!(grad.max_norm(), 0.0);
        assert_eq!(relative_fisher(&p, &p).unwrap(), 0.0);
        let q = mixture(&grid, &[(1.0, 0.1, 1.0)]);
        assert!(relative_fisher(&p, &q).unwrap() > 0.0);
        assert!(wasserstein_gradient_single(&p, &q).unwrap().max_norm() > 0.0);
    }

    #[test]
    fn floor_flag_on_disjoint_supports() {
        let grid = line(0.0, 1.0, 100);
        let left = GridDensity::from_fn(&grid, |x| if x[0] < 0.5 { 1.0 } else { 0.0 }).unwrap();
        let right = GridDensity::from_fn(&grid, |x| if x[0] >= 0.5 { 1.0 } else { 0.0 }).unwrap();
        assert!(floor_flagged(&left, &right));
        assert!(!floor_flagged(&left, &left));
    }
}
