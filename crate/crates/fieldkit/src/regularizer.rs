//! Masked finite-difference regularizer.
//!
//! `C` stacks first-order `[-1, +1]` pairs or second-order `[1, -2, 1]`
//! triples along the requested axes. Rows touching any out-of-mask
//! voxel are dropped, so the quadratic penalty `beta/2 ||C w||^2` only
//! couples voxels inside the mask. Optional per-difference weights
//! multiply the squared differences.

use crate::error::{Error, Result};
use crate::sparse::SparseSpd;
use crate::volume::Mask;
use std::sync::Arc;

/// Finite-difference order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffOrder {
    First,
    Second,
}

/// Coordinate axes a difference row may run along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

pub const ALL_AXES: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

#[derive(Debug, Clone)]
enum Stencil {
    Pairs(Vec<[u32; 2]>),
    Triples(Vec<[u32; 3]>),
}

/// Masked finite-difference operator with cached row structure.
#[derive(Debug, Clone)]
pub struct DifferenceOperator {
    order: DiffOrder,
    mask: Arc<Mask>,
    stencil: Stencil,
    /// Square roots of the per-row weights; empty means all ones.
    sqrt_weights: Vec<f64>,
}

impl DifferenceOperator {
    /// Builds the operator over the masked voxels. Rows are generated
    /// axis by axis (x, then y, then z), scanning anchors in voxel
    /// order, which fixes a deterministic row layout.
    pub fn new(mask: &Arc<Mask>, order: DiffOrder, axes: &[Axis]) -> Self {
        let d = mask.dims();
        let step = |axis: Axis| -> (usize, usize) {
            // (stride, extent) for the axis.
            match axis {
                Axis::X => (1, d.nx),
                Axis::Y => (d.nx, d.ny),
                Axis::Z => (d.nx * d.ny, d.nz),
            }
        };
        let axis_pos = |axis: Axis, j: usize| -> usize {
            let (x, y, z) = d.coords(j);
            match axis {
                Axis::X => x,
                Axis::Y => y,
                Axis::Z => z,
            }
        };
        let stencil = match order {
            DiffOrder::First => {
                let mut rows = Vec::new();
                for &axis in axes {
                    let (stride, extent) = step(axis);
                    for &j in mask.indices() {
                        if axis_pos(axis, j) + 1 < extent && mask.contains(j + stride) {
                            rows.push([j as u32, (j + stride) as u32]);
                        }
                    }
                }
                Stencil::Pairs(rows)
            }
            DiffOrder::Second => {
                let mut rows = Vec::new();
                for &axis in axes {
                    let (stride, extent) = step(axis);
                    for &j in mask.indices() {
                        if axis_pos(axis, j) + 2 < extent
                            && mask.contains(j + stride)
                            && mask.contains(j + 2 * stride)
                        {
                            rows.push([j as u32, (j + stride) as u32, (j + 2 * stride) as u32]);
                        }
                    }
                }
                Stencil::Triples(rows)
            }
        };
        DifferenceOperator {
            order,
            mask: Arc::clone(mask),
            stencil,
            sqrt_weights: Vec::new(),
        }
    }

    /// Attaches per-difference weights (one per row, nonnegative); the
    /// penalty becomes `sum_r w_r (C w)_r^2`.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n_rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} difference rows",
                weights.len(),
                self.n_rows()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidArgument(
                "difference weights must be finite and nonnegative".into(),
            ));
        }
        self.sqrt_weights = weights.iter().map(|w| w.sqrt()).collect();
        Ok(self)
    }

    pub fn order(&self) -> DiffOrder {
        self.order
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    pub fn n_rows(&self) -> usize {
        match &self.stencil {
            Stencil::Pairs(p) => p.len(),
            Stencil::Triples(t) => t.len(),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.mask.dims().n_voxels()
    }

    #[inline]
    fn sw(&self, row: usize) -> f64 {
        if self.sqrt_weights.is_empty() {
            1.0
        } else {
            self.sqrt_weights[row]
        }
    }

    /// `C w`: one value per difference row.
    pub fn apply(&self, omega: &[f64]) -> Vec<f64> {
        assert_eq!(omega.len(), self.n_voxels(), "operator/vector size");
        match &self.stencil {
            Stencil::Pairs(rows) => rows
                .iter()
                .enumerate()
                .map(|(r, &[a, b])| self.sw(r) * (omega[b as usize] - omega[a as usize]))
                .collect(),
            Stencil::Triples(rows) => rows
                .iter()
                .enumerate()
                .map(|(r, &[a, b, c])| {
                    self.sw(r)
                        * (omega[a as usize] - 2.0 * omega[b as usize] + omega[c as usize])
                })
                .collect(),
        }
    }

    /// `C' v`: adjoint of [`DifferenceOperator::apply`].
    pub fn apply_adjoint(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_rows(), "operator/vector size");
        let mut out = vec![0.0; self.n_voxels()];
        match &self.stencil {
            Stencil::Pairs(rows) => {
                for (r, &[a, b]) in rows.iter().enumerate() {
                    let val = self.sw(r) * v[r];
                    out[a as usize] -= val;
                    out[b as usize] += val;
                }
            }
            Stencil::Triples(rows) => {
                for (r, &[a, b, c]) in rows.iter().enumerate() {
                    let val = self.sw(r) * v[r];
                    out[a as usize] += val;
                    out[b as usize] -= 2.0 * val;
                    out[c as usize] += val;
                }
            }
        }
        out
    }

    /// `||C w||^2`, accumulated without forming the row vector.
    pub fn penalty_norm_sq(&self, omega: &[f64]) -> f64 {
        assert_eq!(omega.len(), self.n_voxels(), "operator/vector size");
        match &self.stencil {
            Stencil::Pairs(rows) => rows
                .iter()
                .enumerate()
                .map(|(r, &[a, b])| {
                    let d = self.sw(r) * (omega[b as usize] - omega[a as usize]);
                    d * d
                })
                .sum(),
            Stencil::Triples(rows) => rows
                .iter()
                .enumerate()
                .map(|(r, &[a, b, c])| {
                    let d = self.sw(r)
                        * (omega[a as usize] - 2.0 * omega[b as usize] + omega[c as usize]);
                    d * d
                })
                .sum(),
        }
    }

    /// Assembles `beta * C'C` as a sparse symmetric matrix. Every
    /// diagonal position is structurally present (with value zero
    /// where the operator has no rows) so a diagonal can be added in
    /// place later.
    pub fn assemble_normal_matrix(&self, beta: f64) -> Result<SparseSpd> {
        if beta < 0.0 {
            return Err(Error::InvalidArgument("beta must be >= 0".into()));
        }
        let n = self.n_voxels();
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut push = |i: usize, j: usize, v: f64| {
            // Lower triangle only.
            if i >= j {
                triplets.push((i, j, v));
            } else {
                triplets.push((j, i, v));
            }
        };
        match &self.stencil {
            Stencil::Pairs(rows) => {
                for (r, &[a, b]) in rows.iter().enumerate() {
                    let w = self.sw(r) * self.sw(r) * beta;
                    let (a, b) = (a as usize, b as usize);
                    push(a, a, w);
                    push(b, b, w);
                    push(a, b, -w);
                }
            }
            Stencil::Triples(rows) => {
                for (r, &[a, b, c]) in rows.iter().enumerate() {
                    let w = self.sw(r) * self.sw(r) * beta;
                    let (a, b, c) = (a as usize, b as usize, c as usize);
                    push(a, a, w);
                    push(b, b, 4.0 * w);
                    push(c, c, w);
                    push(a, b, -2.0 * w);
                    push(b, c, -2.0 * w);
                    push(a, c, w);
                }
            }
        }
        for j in 0..n {
            triplets.push((j, j, 0.0));
        }
        SparseSpd::from_lower_triplets(n, triplets)
    }

    /// Per-voxel Gershgorin bound `m_j = beta * sum_k |C'C|_jk`, so
    /// `diag(m)` dominates `beta * C'C`.
    pub fn diag_majorizer(&self, beta: f64) -> Result<Vec<f64>> {
        if beta < 0.0 {
            return Err(Error::InvalidArgument("beta must be >= 0".into()));
        }
        let mut m = vec![0.0; self.n_voxels()];
        // A difference row with coefficients u contributes
        // |u_a| * sum_b |u_b| to the absolute row sum of each voxel it
        // touches; summing over rows gives the |C'C| row sums without
        // assembling the matrix.
        match &self.stencil {
            Stencil::Pairs(rows) => {
                for (r, &[a, b]) in rows.iter().enumerate() {
                    let w = self.sw(r) * self.sw(r) * beta;
                    m[a as usize] += 2.0 * w;
                    m[b as usize] += 2.0 * w;
                }
            }
            Stencil::Triples(rows) => {
                for (r, &[a, b, c]) in rows.iter().enumerate() {
                    let w = self.sw(r) * self.sw(r) * beta;
                    m[a as usize] += 4.0 * w;
                    m[b as usize] += 8.0 * w;
                    m[c as usize] += 4.0 * w;
                }
            }
        }
        Ok(m)
    }
}
