use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

/// Uniform cell-centred grid on a box in one or two dimensions.
///
/// Node `k` along an axis sits at the centre of cell `k`, i.e. at
/// `lower + (k + ½)·Δx` with `Δx = (upper − lower) / nodes`. Quadrature is the
/// midpoint rule (value × cell volume), which makes total mass an exact sum
/// of cell masses for the finite-volume schemes.
///
/// Values are stored flat; in 2D the second axis is contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes: Vec<usize>,
}

impl Grid {
    pub const MIN_NODES: usize = 16;

    pub fn new(lower: Vec<f64>, upper: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        let dim = nodes.len();
        if !(1..=2).contains(&dim) {
            return Err(FlowError::InvalidGrid(format!(
                "dimension must be 1 or 2, got {dim}"
            )));
        }
        if lower.len() != dim || upper.len() != dim {
            return Err(FlowError::InvalidGrid(
                "bounds and node counts must have one entry per axis".into(),
            ));
        }
        for axis in 0..dim {
            if nodes[axis] < Self::MIN_NODES {
                return Err(FlowError::InvalidGrid(format!(
                    "axis {axis} has {} nodes, minimum is {}",
                    nodes[axis],
                    Self::MIN_NODES
                )));
            }
            if !(lower[axis].is_finite() && upper[axis].is_finite() && upper[axis] > lower[axis]) {
                return Err(FlowError::InvalidGrid(format!(
                    "axis {axis} bounds [{}, {}] do not give a positive spacing",
                    lower[axis], upper[axis]
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            nodes,
        })
    }

    pub fn uniform_1d(lower: f64, upper: f64, nodes: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![nodes])
    }

    pub fn dimension(&self) -> usize {
        self.nodes.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.nodes[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dimension())
            .map(|a| self.spacing(a))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dimension()).map(|a| self.spacing(a)).product()
    }

    pub(crate) fn stride(&self, axis: usize) -> usize {
        if axis + 1 == self.dimension() {
            1
        } else {
            self.nodes[1]
        }
    }

    /// Position of node `index` along `axis`.
    pub fn axis_index(&self, index: usize, axis: usize) -> usize {
        (index / self.stride(axis)) % self.nodes[axis]
    }

    pub fn coordinate(&self, axis: usize, k: usize) -> f64 {
        self.lower[axis] + (k as f64 + 0.5) * self.spacing(axis)
    }

    /// Coordinates of node `index`.
    pub fn point(&self, index: usize) -> Vec<f64> {
        (0..self.dimension())
            .map(|a| self.coordinate(a, self.axis_index(index, a)))
            .collect()
    }

    /// Midpoint-rule integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Calls `f(line_start, stride)` for every grid line along `axis`; the
    /// nodes of a line are `line_start + k·stride` for `k < nodes[axis]`.
    pub fn for_each_line(&self, axis: usize, mut f: impl FnMut(usize, usize)) {
        let stride = self.stride(axis);
        let span = self.nodes[axis] * stride;
        for outer in (0..self.len()).step_by(span) {
            for inner in 0..stride {
                f(outer + inner, stride);
            }
        }
    }

    /// Calls `f(face, lo, hi)` for every interior face normal to `axis`,
    /// where `lo` and `hi` are the flat indices of the two adjacent nodes.
    /// Face numbering is dense and follows the iteration order.
    pub fn for_each_face(&self, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.nodes[axis];
        let mut face = 0;
        self.for_each_line(axis, |start, stride| {
            for k in 0..n - 1 {
                let lo = start + k * stride;
                f(face, lo, lo + stride);
                face += 1;
            }
        });
    }

    /// Number of interior faces normal to `axis`.
    pub fn face_count(&self, axis: usize) -> usize {
        self.len() / self.nodes[axis] * (self.nodes[axis] - 1)
    }

    /// Second-order derivative of nodal values along `axis`: central
    /// differences inside, one-sided three-point stencils at the boundary.
    pub fn derivative(&self, values: &[f64], axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.derivative_into(values, axis, &mut out);
        out
    }

    /// [`Grid::derivative`] writing into a caller-provided buffer.
    pub fn derivative_into(&self, values: &[f64], axis: usize, out: &mut [f64]) {
        let n = self.nodes[axis];
        let inv = 1.0 / (2.0 * self.spacing(axis));
        self.for_each_line(axis, |start, s| {
            let last = start + (n - 1) * s;
            out[start] = (-3.0 * values[start] + 4.0 * values[start + s] - values[start + 2 * s]) * inv;
            for k in 1..n - 1 {
                let i = start + k * s;
                out[i] = (values[i + s] - values[i - s]) * inv;
            }
            out[last] = (3.0 * values[last] - 4.0 * values[last - s] + values[last - 2 * s]) * inv;
        });
    }

    /// Gradient of nodal values, one component vector per axis.
    pub fn gradient(&self, values: &[f64]) -> Vec<Vec<f64>> {
        (0..self.dimension())
            .map(|a| self.derivative(values, a))
            .collect()
    }

    /// True when node `index` is not on the boundary of the box.
    pub fn is_interior(&self, index: usize) -> bool {
        (0..self.dimension()).all(|a| {
            let k = self.axis_index(index, a);
            k > 0 && k + 1 < self.nodes[a]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_degenerate_grids() {
        assert!(Grid::uniform_1d(0.0, 1.0, 8).is_err());
        assert!(Grid::uniform_1d(1.0, 1.0, 32).is_err());
        assert!(Grid::new(vec![0.0; 3], vec![1.0; 3], vec![16; 3]).is_err());
    }

    #[test]
    fn cell_centres_and_volume() {
        let g = Grid::uniform_1d(-10.0, 10.0, 2001).unwrap();
        assert!(g.coordinate(0, 1000).abs() < 1e-12);
        assert!((g.integrate(&vec![1.0; g.len()]) - 20.0).abs() < 1e-12);

        let g2 = Grid::new(vec![0.0, -1.0], vec![2.0, 1.0], vec![16, 20]).unwrap();
        assert_eq!(g2.len(), 320);
        assert_eq!(g2.point(21), vec![g2.coordinate(0, 1), g2.coordinate(1, 1)]);
        assert_eq!(g2.face_count(0), 15 * 20);
        assert_eq!(g2.face_count(1), 16 * 19);
        let mut count = 0;
        g2.for_each_face(1, |_, lo, hi| {
            assert_eq!(hi, lo + 1);
            count += 1;
        });
        assert_eq!(count, g2.face_count(1));
    }

    #[test]
    fn derivative_is_exact_on_quadratics() {
        let g = Grid::new(vec![-1.0, 0.0], vec![1.0, 3.0], vec![17, 21]).unwrap();
        let values: Vec<f64> = (0..g.len())
            .map(|i| {
                let p = g.point(i);
                p[0] * p[0] - 2.0 * p[0] * p[1] + 0.5 * p[1] * p[1]
            })
            .collect();
        let grad = g.gradient(&values);
        for i in 0..g.len() {
            let p = g.point(i);
            assert!((grad[0][i] - (2.0 * p[0] - 2.0 * p[1])).abs() < 1e-10);
            assert!((grad[1][i] - (-2.0 * p[0] + p[1])).abs() < 1e-10);
        }
    }
}
