//! Sparse symmetric storage, Hessian assembly, incomplete Cholesky
//! factorizations, and triangular solves.
//!
//! Matrices are stored as the lower triangle in compressed-column
//! form with sorted row indices. The factorizations are left-looking
//! column eliminations with row lists; the threshold variant drops
//! factor entries below an absolute tolerance (anchored to the
//! largest Hessian entry by callers), and a zero tolerance yields the
//! complete Cholesky factor.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Symmetric positive (semi)definite matrix, lower triangle in CSC.
#[derive(Debug, Clone)]
pub struct SparseSpd {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSpd {
    /// Builds from lower-triangle triplets `(i, j, v)` with `i >= j`.
    /// Duplicate positions are summed.
    pub fn from_lower_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, v) in &triplets {
            if i < j || i >= n {
                return Err(Error::InvalidArgument(format!(
                    "triplet ({i}, {j}) outside the lower triangle of order {n}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("matrix entry".into()));
            }
        }
        triplets.sort_unstable_by_key(|&(i, j, _)| (j, i));
        let mut col_counts = vec![0usize; n + 1];
        let mut row_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            if last == Some((j, i)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(i);
                values.push(v);
                col_counts[j + 1] += 1;
                last = Some((j, i));
            }
        }
        for j in 0..n {
            col_counts[j + 1] += col_counts[j];
        }
        Ok(SparseSpd {
            n,
            col_ptr: col_counts,
            row_idx,
            values,
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Stored entries (lower triangle including diagonal).
    pub fn nnz_lower(&self) -> usize {
        self.row_idx.len()
    }

    /// Entry count of the full symmetric matrix.
    pub fn nnz_symmetric(&self) -> usize {
        let diag = (0..self.n)
            .filter(|&j| {
                let (rows, _) = self.col(j);
                rows.first() == Some(&j)
            })
            .count();
        2 * self.nnz_lower() - diag
    }

    /// Rows and values of stored column `j` (rows ascending, `>= j`).
    #[inline]
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        (&self.row_idx[lo..hi], &self.values[lo..hi])
    }

    /// Symmetric accessor; absent positions read as zero.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let (rows, vals) = self.col(j);
        match rows.binary_search(&i) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.get(j, j)).collect()
    }

    /// Largest entry magnitude.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Symmetric matrix-vector product from the lower triangle.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "matrix/vector size");
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let (rows, vals) = self.col(j);
            let xj = x[j];
            for (&i, &v) in rows.iter().zip(vals) {
                y[i] += v * xj;
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// Returns a copy with `extra[j]` added to each diagonal entry.
    fn with_diagonal_added(&self, extra: &[f64]) -> Result<SparseSpd> {
        assert_eq!(extra.len(), self.n, "diagonal/matrix size");
        let mut out = self.clone();
        for j in 0..self.n {
            let lo = out.col_ptr[j];
            let hi = out.col_ptr[j + 1];
            if lo < hi && out.row_idx[lo] == j {
                out.values[lo] += extra[j];
            } else if extra[j] != 0.0 {
                return Err(Error::Singular(format!(
                    "column {j} has no structural diagonal to add to"
                )));
            }
        }
        Ok(out)
    }
}

/// Assembles the Hessian approximation `H = diag(d) + beta * C'C`
/// from the curvature diagonal and the pre-assembled regularizer
/// normal matrix (which carries the `beta` factor already).
pub fn assemble_hessian(d: &[f64], reg: &SparseSpd) -> Result<SparseSpd> {
    if d.len() != reg.order() {
        return Err(Error::ShapeMismatch(format!(
            "{} curvatures for a matrix of order {}",
            d.len(),
            reg.order()
        )));
    }
    if d.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument(
            "curvature diagonal must be finite and nonnegative".into(),
        ));
    }
    let h = reg.with_diagonal_added(d)?;
    if h.values.iter().all(|&v| v == 0.0) {
        return Err(Error::Singular("all-zero Hessian".into()));
    }
    Ok(h)
}

/// Which entries an incomplete factorization keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorKind {
    /// Pattern restricted to the matrix's own nonzero set.
    ZeroFill,
    /// Fill entries with magnitude below the tolerance are dropped.
    Threshold(f64),
    /// No dropping (threshold zero).
    Complete,
}

/// Sparse lower-triangular factor with `L L' ~ H`.
#[derive(Debug, Clone)]
pub struct TriangularFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
    kind: FactorKind,
    shift: f64,
}

const SHIFTS: [f64; 4] = [0.0, 1e-3, 1e-2, 1e-1];

/// Incomplete Cholesky restricted to the pattern of `H`.
pub fn ichol_zero_fill(h: &SparseSpd) -> Result<TriangularFactor> {
    ichol_with_shifts(h, DropRule::ZeroFill)
}

/// Incomplete Cholesky with threshold dropping: candidate factor
/// entries with magnitude below `tau` are discarded. `tau = 0` gives
/// the complete factorization. Callers anchor `tau` to the largest
/// Hessian entry (`tau = scale * max |H_ij|`).
pub fn ichol_threshold(h: &SparseSpd, tau: f64) -> Result<TriangularFactor> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument("tolerance must be >= 0".into()));
    }
    ichol_with_shifts(h, DropRule::Threshold(tau))
}

#[derive(Clone, Copy)]
enum DropRule {
    ZeroFill,
    Threshold(f64),
}

fn ichol_with_shifts(h: &SparseSpd, rule: DropRule) -> Result<TriangularFactor> {
    if h.order() == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let scale = h.max_abs();
    if scale <= 0.0 {
        return Err(Error::Singular("all-zero matrix".into()));
    }
    // On a nonpositive pivot, retry on H + shift * diag(H).
    for &shift in &SHIFTS {
        match factorize(h, rule, shift, scale) {
            Ok(f) => return Ok(f),
            Err(Error::FactorizationBreakdown) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::FactorizationBreakdown)
}

fn factorize(h: &SparseSpd, rule: DropRule, shift: f64, scale: f64) -> Result<TriangularFactor> {
    let n = h.order();
    let nil = usize::MAX;

    let mut col_ptr = Vec::with_capacity(n + 1);
    col_ptr.push(0usize);
    let mut l_rows: Vec<usize> = Vec::with_capacity(h.nnz_lower());
    let mut l_vals: Vec<f64> = Vec::with_capacity(h.nnz_lower());

    // Linked lists over rows: head[i] holds a column whose next
    // unconsumed entry sits at row i.
    let mut head = vec![nil; n];
    let mut link = vec![nil; n];
    let mut next_pos = vec![0usize; n];

    // Dense accumulator with stamps instead of per-column clearing.
    let mut w = vec![0.0f64; n];
    let mut in_w = vec![0u32; n];
    let mut in_h = vec![0u32; n];
    let mut touched: Vec<usize> = Vec::with_capacity(64);
    let mut stamp = 0u32;

    for j in 0..n {
        stamp += 1;
        touched.clear();

        // Scatter column j of H (diagonal optionally shifted).
        let (hrows, hvals) = h.col(j);
        for (&i, &v) in hrows.iter().zip(hvals) {
            let val = if i == j { v * (1.0 + shift) } else { v };
            w[i] = val;
            in_w[i] = stamp;
            in_h[i] = stamp;
            touched.push(i);
        }
        if in_w[j] != stamp {
            w[j] = 0.0;
            in_w[j] = stamp;
            touched.push(j);
        }

        // Apply updates from all earlier columns with an entry in row j.
        let mut k = head[j];
        while k != nil {
            let k_next = link[k];
            let pos = next_pos[k];
            let end = col_ptr[k + 1];
            let ljk = l_vals[pos];
            for p in pos..end {
                let i = l_rows[p];
                if in_w[i] != stamp {
                    w[i] = 0.0;
                    in_w[i] = stamp;
                    touched.push(i);
                }
                w[i] -= l_vals[p] * ljk;
            }
            next_pos[k] = pos + 1;
            if pos + 1 < end {
                let r = l_rows[pos + 1];
                link[k] = head[r];
                head[r] = k;
            }
            k = k_next;
        }

        let pivot = w[j];
        let mut drop_below = false;
        let ljj = if pivot > 0.0 {
            pivot.sqrt()
        } else {
            // A column whose remaining couplings are numerically zero
            // belongs to an exactly singular but consistent block
            // (e.g. the last voxel of a pure-Laplacian component);
            // give it a tiny positive pivot instead of shifting the
            // whole matrix. Significant remaining coupling is a real
            // breakdown.
            let below_max = touched
                .iter()
                .filter(|&&i| i > j)
                .map(|&i| w[i].abs())
                .fold(0.0f64, f64::max);
            if pivot >= -1e-12 * scale && below_max <= 1e-10 * scale {
                drop_below = true;
                scale.sqrt() * 1e-8
            } else {
                return Err(Error::FactorizationBreakdown);
            }
        };

        // Emit the column: diagonal first, then kept off-diagonals.
        l_rows.push(j);
        l_vals.push(ljj);
        let col_start = l_rows.len() - 1;
        if !drop_below {
            let mut off: Vec<(usize, f64)> = Vec::with_capacity(touched.len());
            for &i in &touched {
                if i <= j {
                    continue;
                }
                let lij = w[i] / ljj;
                let keep = match rule {
                    DropRule::ZeroFill => in_h[i] == stamp,
                    DropRule::Threshold(tau) => lij.abs() >= tau,
                };
                if keep {
                    off.push((i, lij));
                }
            }
            off.sort_unstable_by_key(|&(i, _)| i);
            for (i, v) in off {
                l_rows.push(i);
                l_vals.push(v);
            }
        }
        col_ptr.push(l_rows.len());

        // Register this column for its first below-diagonal row.
        if col_start + 1 < l_rows.len() {
            next_pos[j] = col_start + 1;
            let r = l_rows[col_start + 1];
            link[j] = head[r];
            head[r] = j;
        }
    }

    let kind = match rule {
        DropRule::ZeroFill => FactorKind::ZeroFill,
        DropRule::Threshold(t) if t == 0.0 => FactorKind::Complete,
        DropRule::Threshold(t) => FactorKind::Threshold(t),
    };
    Ok(TriangularFactor {
        n,
        col_ptr,
        row_idx: l_rows,
        values: l_vals,
        kind,
        shift,
    })
}

impl TriangularFactor {
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    /// Diagonal shift applied before the factorization succeeded
    /// (0 when none was needed).
    pub fn shift(&self) -> f64 {
        self.shift
    }

    #[inline]
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        (&self.row_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i < j {
            return 0.0;
        }
        let (rows, vals) = self.col(j);
        match rows.binary_search(&i) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// Solves `L x = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "factor/vector size");
        let mut x = b.to_vec();
        for j in 0..self.n {
            let (rows, vals) = self.col(j);
            let xj = x[j] / vals[0];
            x[j] = xj;
            for (&i, &v) in rows.iter().zip(vals).skip(1) {
                x[i] -= v * xj;
            }
        }
        x
    }

    /// Solves `L' x = b` by backward substitution.
    pub fn solve_lower_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "factor/vector size");
        let mut x = b.to_vec();
        for j in (0..self.n).rev() {
            let (rows, vals) = self.col(j);
            let mut t = x[j];
            for (&i, &v) in rows.iter().zip(vals).skip(1) {
                t -= v * x[i];
            }
            x[j] = t / vals[0];
        }
        x
    }

    /// Solves `L L' x = g` (forward then backward substitution).
    pub fn solve(&self, g: &[f64]) -> Vec<f64> {
        self.solve_lower_transpose(&self.solve_lower(g))
    }
}

/// Preconditioner quality `||I - L^-1 H L^-T||_F / sqrt(n)`, computed
/// column by column.
pub fn preconditioner_nrmse(l: &TriangularFactor, h: &SparseSpd) -> f64 {
    let n = h.order();
    assert_eq!(l.order(), n, "factor/matrix size");
    let frob_sq: f64 = (0..n)
        .into_par_iter()
        .map(|col| {
            let mut e = vec![0.0; n];
            e[col] = 1.0;
            let t1 = l.solve_lower_transpose(&e);
            let t2 = h.matvec(&t1);
            let m_col = l.solve_lower(&t2);
            let mut acc = 0.0;
            for (i, &v) in m_col.iter().enumerate() {
                let d = if i == col { v - 1.0 } else { v };
                acc += d * d;
            }
            acc
        })
        .sum();
    (frob_sq / n as f64).sqrt()
}
