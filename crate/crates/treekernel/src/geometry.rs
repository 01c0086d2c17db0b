//! Axis-aligned hyperrectangles of the unit cube and finite partitions.
//!
//! Cells follow the left-closed, right-open convention `[a, b)` on every
//! axis, except that the upper face is closed when it touches 1, so that a
//! collection of cells produced by recursive binary splitting is a true
//! partition of `[0,1]^p`.

use crate::error::{Error, Result};

/// Cell `[a, b>` of `[0,1]^p`: half-open on each axis unless the upper
/// bound equals 1, in which case that axis is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperrectangle {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Hyperrectangle {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for j in 0..lower.len() {
            if !(0.0..=1.0).contains(&lower[j]) {
                return Err(Error::OutOfUnitCube {
                    axis: j,
                    value: lower[j],
                });
            }
            if !(0.0..=1.0).contains(&upper[j]) {
                return Err(Error::OutOfUnitCube {
                    axis: j,
                    value: upper[j],
                });
            }
            if lower[j] >= upper[j] {
                return Err(Error::InvalidConfig(format!(
                    "degenerate cell on axis {j}: [{}, {}]",
                    lower[j], upper[j]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The full unit cube `[0,1]^p`.
    pub fn unit_cube(p: usize) -> Self {
        Self {
            lower: vec![0.0; p],
            upper: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Membership under the closed-at-1 convention.
    pub fn contains(&self, z: &[f64]) -> Result<bool> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(self.contains_unchecked(z))
    }

    pub(crate) fn contains_unchecked(&self, z: &[f64]) -> bool {
        for j in 0..self.dim() {
            let (a, b) = (self.lower[j], self.upper[j]);
            if z[j] < a {
                return false;
            }
            if b < 1.0 {
                if z[j] >= b {
                    return false;
                }
            } else if z[j] > b {
                return false;
            }
        }
        true
    }

    /// Split at threshold `t = a_j + u (b_j - a_j)`. The left child keeps
    /// `x_j < t`, the right child keeps `x_j >= t`.
    pub fn split(&self, axis: usize, fraction: f64) -> Result<(Hyperrectangle, Hyperrectangle)> {
        if axis >= self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: axis,
            });
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split fraction must be in (0,1), got {fraction}"
            )));
        }
        let (a, b) = (self.lower[axis], self.upper[axis]);
        let t = a + fraction * (b - a);
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[axis] = t;
        right.lower[axis] = t;
        Ok((left, right))
    }

    /// Lebesgue volume; computed in log space for high dimension to avoid
    /// underflow.
    pub fn volume(&self) -> f64 {
        if self.dim() > 30 {
            let log_v: f64 = (0..self.dim())
                .map(|j| (self.upper[j] - self.lower[j]).ln())
                .sum();
            log_v.exp()
        } else {
            (0..self.dim())
                .map(|j| self.upper[j] - self.lower[j])
                .product()
        }
    }

    /// Metric on cells: max over axes of the larger endpoint displacement.
    pub fn rho_distance(&self, other: &Hyperrectangle) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let mut d = 0.0f64;
        for j in 0..self.dim() {
            d = d
                .max((self.lower[j] - other.lower[j]).abs())
                .max((self.upper[j] - other.upper[j]).abs());
        }
        Ok(d)
    }
}

/// A finite leaf set covering `[0,1]^p`.
#[derive(Debug, Clone)]
pub struct Partition {
    leaves: Vec<Hyperrectangle>,
    depth: usize,
}

impl Partition {
    pub fn new(leaves: Vec<Hyperrectangle>, depth: usize) -> Result<Self> {
        if leaves.is_empty() {
            return Err(Error::InvalidConfig("partition with no leaves".into()));
        }
        Ok(Self { leaves, depth })
    }

    pub fn single_leaf(p: usize) -> Self {
        Self {
            leaves: vec![Hyperrectangle::unit_cube(p)],
            depth: 0,
        }
    }

    pub fn leaves(&self) -> &[Hyperrectangle] {
        &self.leaves
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.leaves[0].dim()
    }

    /// Index of the unique leaf containing `z` (linear scan).
    pub fn locate(&self, z: &[f64]) -> Result<usize> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        for (i, leaf) in self.leaves.iter().enumerate() {
            if leaf.contains_unchecked(z) {
                return Ok(i);
            }
        }
        Err(Error::NotCovered)
    }

    /// Sum of leaf volumes; 1 for a valid partition up to rounding.
    pub fn total_volume(&self) -> f64 {
        self.leaves.iter().map(|l| l.volume()).sum()
    }
}
