//! Preconditioned nonlinear conjugate gradient with a monotone
//! majorizer line search, plus the baselines used for benchmarking:
//! a diagonal quadratic-majorizer update and NCG with no or diagonal
//! preconditioning.
//!
//! Each outer iteration computes the gradient, applies the inverse
//! preconditioner (identity, Hessian diagonal, or an incomplete
//! Cholesky factor of `D + beta C'C` rebuilt at the current iterate),
//! combines directions with a Polak-Ribiere-plus coefficient, and
//! steps by Newton iterations on the quadratic majorizer of the line
//! restriction. The majorizer construction makes the cost sequence
//! nonincreasing by construction; the iteration log records it so the
//! contract can be checked.

use crate::error::{Error, Result};
use crate::likelihood::{
    cost_psi, curvature_upper_bound, curvatures, grad_psi, line_derivative_and_curvature,
    same_mask, FieldMap,
};
use crate::regularizer::DifferenceOperator;
use crate::signal_model::PairTermCache;
use crate::sparse::{assemble_hessian, ichol_threshold, ichol_zero_fill, SparseSpd};
use std::time::Instant;

/// Preconditioner choice for the NCG direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preconditioner {
    /// No preconditioning: `p = -g`.
    Identity,
    /// Hessian diagonal; application is elementwise division.
    Diag,
    /// Incomplete Cholesky restricted to the Hessian pattern.
    Ic0,
    /// Threshold incomplete Cholesky with tolerance
    /// `scale * max|H_ij|` (0 keeps every entry: complete factor).
    Ict { scale: f64 },
}

impl Preconditioner {
    pub fn label(&self) -> &'static str {
        match self {
            Preconditioner::Identity => "ncg",
            Preconditioner::Diag => "ncg-d",
            Preconditioner::Ic0 => "ncg-ic0",
            Preconditioner::Ict { .. } => "ncg-ic",
        }
    }
}

/// Search-direction restart behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestartPolicy {
    /// Reset to the preconditioned steepest-descent direction whenever
    /// the combined direction fails the descent test.
    DescentReset,
    /// Rely on the nonnegativity clamp alone.
    PrPlusOnly,
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub preconditioner: Preconditioner,
    /// Outer NCG (or majorizer) iterations.
    pub outer_iters: usize,
    /// Newton steps on the line-search majorizer per outer iteration.
    pub inner_iters: usize,
    /// Optional early exit on the gradient sup-norm.
    pub grad_tol: Option<f64>,
    pub restart: RestartPolicy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            preconditioner: Preconditioner::Ict { scale: 1e-3 },
            outer_iters: 30,
            inner_iters: 10,
            grad_tol: None,
            restart: RestartPolicy::DescentReset,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if self.outer_iters < 1 || self.inner_iters < 1 {
            return Err(Error::InvalidArgument(
                "need at least one outer and one inner iteration".into(),
            ));
        }
        if let Preconditioner::Ict { scale } = self.preconditioner {
            if !(scale >= 0.0) {
                return Err(Error::InvalidArgument(
                    "ict tolerance scale must be >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The minimization problem: data cache, regularizer, and weight.
pub struct FieldmapProblem<'a> {
    pub cache: &'a PairTermCache,
    pub reg: &'a DifferenceOperator,
    pub beta: f64,
}

/// Optional references for per-iteration error reporting (both in Hz).
#[derive(Default, Clone, Copy)]
pub struct ReferenceMaps<'a> {
    /// Ground truth, for RMSE columns.
    pub truth_hz: Option<&'a [f64]>,
    /// Converged long-run estimate, for RMSD columns.
    pub converged_hz: Option<&'a [f64]>,
}

/// One row of the convergence log (state at one iterate).
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: usize,
    pub time_s: f64,
    pub psi: f64,
    pub grad_norm: f64,
    /// Step size used to reach this iterate (0 for the initial row).
    pub step: f64,
    pub rmse_hz: Option<f64>,
    pub rmsd_hz: Option<f64>,
    pub factor_nnz: Option<usize>,
    pub note: Option<String>,
}

/// Convergence log; `psi` must be nonincreasing across rows.
#[derive(Debug, Clone)]
pub struct IterationLog {
    pub method: String,
    pub rows: Vec<IterationRecord>,
}

impl IterationLog {
    /// Largest increase between consecutive cost values (<= 0 when
    /// perfectly monotone).
    pub fn max_psi_increase(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| w[1].psi - w[0].psi)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Checks monotonicity up to a relative slack for roundoff.
    pub fn is_monotone(&self, rel_tol: f64) -> bool {
        self.rows.windows(2).all(|w| {
            w[1].psi <= w[0].psi + rel_tol * (1.0 + w[0].psi.abs())
        })
    }

    pub fn final_psi(&self) -> f64 {
        self.rows.last().map(|r| r.psi).unwrap_or(f64::NAN)
    }

    /// First iterate index whose RMSD column is below `tol_hz`.
    pub fn first_below_rmsd(&self, tol_hz: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.rmsd_hz.is_some_and(|v| v < tol_hz))
            .map(|r| r.iter)
    }

    /// Wall time at which the RMSD column first dropped below `tol_hz`.
    pub fn time_below_rmsd(&self, tol_hz: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.rmsd_hz.is_some_and(|v| v < tol_hz))
            .map(|r| r.time_s)
    }
}

fn rms_diff_hz(omega_rad: &[f64], ref_hz: &[f64], mask: &crate::volume::Mask) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut acc = 0.0;
    for &j in mask.indices() {
        let d = omega_rad[j] / two_pi - ref_hz[j];
        acc += d * d;
    }
    (acc / mask.count() as f64).sqrt()
}

fn record_row(
    prob: &FieldmapProblem,
    refs: &ReferenceMaps,
    iter: usize,
    t0: Instant,
    omega: &[f64],
    psi: f64,
    grad_norm: f64,
    step: f64,
    factor_nnz: Option<usize>,
    note: Option<String>,
) -> IterationRecord {
    let mask = prob.cache.mask();
    IterationRecord {
        iter,
        time_s: t0.elapsed().as_secs_f64(),
        psi,
        grad_norm,
        step,
        rmse_hz: refs.truth_hz.map(|t| rms_diff_hz(omega, t, mask)),
        rmsd_hz: refs.converged_hz.map(|t| rms_diff_hz(omega, t, mask)),
        factor_nnz,
        note,
    }
}

/// Hessian diagonal `d + beta * diag(C'C)` for the diagonal
/// preconditioner, computed without assembling the matrix.
pub fn diag_preconditioner(
    d: &[f64],
    reg: &DifferenceOperator,
    beta: f64,
) -> Result<Vec<f64>> {
    if beta < 0.0 {
        return Err(Error::InvalidArgument("beta must be >= 0".into()));
    }
    let reg_m = reg.assemble_normal_matrix(beta)?;
    let mut out = reg_m.diag();
    for (o, dj) in out.iter_mut().zip(d) {
        *o += dj;
    }
    Ok(out)
}

/// Elementwise application of the inverse diagonal; rows with a zero
/// diagonal (fully decoupled voxels) fall back to the identity.
fn apply_diag_inverse(diag: &[f64], g: &[f64]) -> Vec<f64> {
    diag.iter()
        .zip(g)
        .map(|(&h, &gj)| if h > 0.0 { -gj / h } else { -gj })
        .collect()
}

/// Result of the monotone line search.
#[derive(Debug, Clone)]
pub struct LineSearchResult {
    pub alpha: f64,
    /// The full inner-iteration trajectory, starting at 0.
    pub alphas: Vec<f64>,
    /// Set when the curvature denominator vanished (flat direction).
    pub flat: bool,
}

/// The cost restricted to a line `w + alpha z`, with the regularizer
/// inner products precomputed once per outer iteration.
pub struct LineRestriction<'a> {
    cache: &'a PairTermCache,
    omega: &'a [f64],
    dir: &'a [f64],
    beta: f64,
    cz_norm_sq: f64,
    cw_dot_cz: f64,
}

impl<'a> LineRestriction<'a> {
    pub fn new(
        cache: &'a PairTermCache,
        reg: &DifferenceOperator,
        beta: f64,
        omega: &'a [f64],
        dir: &'a [f64],
    ) -> Self {
        let cz = reg.apply(dir);
        let cw = reg.apply(omega);
        let cz_norm_sq = cz.iter().map(|v| v * v).sum();
        let cw_dot_cz = cw.iter().zip(&cz).map(|(a, b)| a * b).sum();
        LineRestriction {
            cache,
            omega,
            dir,
            beta,
            cz_norm_sq,
            cw_dot_cz,
        }
    }

    /// `f'(alpha)` and the majorizer curvature `d + beta ||Cz||^2`.
    pub fn derivative_and_curvature(&self, alpha: f64) -> (f64, f64) {
        let (fp_data, dcurv) =
            line_derivative_and_curvature(self.cache, self.omega, self.dir, alpha);
        let fp = fp_data + self.beta * (self.cw_dot_cz + alpha * self.cz_norm_sq);
        (fp, dcurv + self.beta * self.cz_norm_sq)
    }
}

/// Monotone majorizer line search: Newton steps on the quadratic
/// majorizer built from the optimal curvatures at each inner iterate.
/// Every step satisfies `f(alpha_{k+1}) <= f(alpha_k)`.
pub fn line_search(restriction: &LineRestriction, inner_iters: usize) -> LineSearchResult {
    let mut alpha = 0.0;
    let mut alphas = Vec::with_capacity(inner_iters + 1);
    alphas.push(alpha);
    for _ in 0..inner_iters {
        let (fp, denom) = restriction.derivative_and_curvature(alpha);
        if denom <= 0.0 {
            return LineSearchResult {
                alpha,
                alphas,
                flat: true,
            };
        }
        alpha -= fp / denom;
        alphas.push(alpha);
    }
    LineSearchResult {
        alpha,
        alphas,
        flat: false,
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Builds the direction `p = -P^{-1} g` for the configured
/// preconditioner, returning the factor fill when one was computed.
/// An incomplete factorization that breaks down even after diagonal
/// shifts falls back to the diagonal preconditioner for this
/// iteration.
fn preconditioned_direction(
    prob: &FieldmapProblem,
    cfg: &SolverConfig,
    reg_matrix: &SparseSpd,
    reg_diag: &[f64],
    omega: &[f64],
    g: &[f64],
) -> Result<(Vec<f64>, Option<usize>, Option<String>)> {
    match cfg.preconditioner {
        Preconditioner::Identity => Ok((g.iter().map(|v| -v).collect(), None, None)),
        Preconditioner::Diag => {
            let d = curvatures(prob.cache, omega);
            let diag: Vec<f64> = d.iter().zip(reg_diag).map(|(a, b)| a + b).collect();
            Ok((apply_diag_inverse(&diag, g), None, None))
        }
        Preconditioner::Ic0 | Preconditioner::Ict { .. } => {
            let d = curvatures(prob.cache, omega);
            // Fully decoupled rows (no data, no regularizer coupling)
            // get a unit diagonal; their gradient is zero so the
            // direction stays zero there.
            let d_padded: Vec<f64> = d
                .iter()
                .zip(reg_diag)
                .map(|(&dj, &rj)| if dj + rj > 0.0 { dj } else { 1.0 })
                .collect();
            let h = assemble_hessian(&d_padded, reg_matrix)?;
            let factor = match cfg.preconditioner {
                Preconditioner::Ic0 => ichol_zero_fill(&h),
                Preconditioner::Ict { scale } => ichol_threshold(&h, scale * h.max_abs()),
                _ => unreachable!(),
            };
            match factor {
                Ok(f) => {
                    let mut p = f.solve(g);
                    for v in &mut p {
                        *v = -*v;
                    }
                    Ok((p, Some(f.nnz()), None))
                }
                Err(Error::FactorizationBreakdown) => {
                    let diag: Vec<f64> = d.iter().zip(reg_diag).map(|(a, b)| a + b).collect();
                    Ok((
                        apply_diag_inverse(&diag, g),
                        None,
                        Some("factor breakdown, diagonal fallback".into()),
                    ))
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Preconditioned NCG with Polak-Ribiere-plus updates and the
/// monotone majorizer line search.
pub fn ncg_mls(
    prob: &FieldmapProblem,
    omega0: &FieldMap,
    cfg: &SolverConfig,
    refs: &ReferenceMaps,
) -> Result<(FieldMap, IterationLog)> {
    cfg.validate()?;
    if prob.beta < 0.0 {
        return Err(Error::InvalidArgument("beta must be >= 0".into()));
    }
    if !same_mask(prob.cache.mask(), omega0.mask())
        || !same_mask(prob.cache.mask(), prob.reg.mask())
    {
        return Err(Error::InvalidMask(
            "cache, regularizer, and initial field map masks differ".into(),
        ));
    }
    let nv = prob.cache.n_voxels();
    let reg_matrix = prob.reg.assemble_normal_matrix(prob.beta)?;
    let reg_diag = reg_matrix.diag();

    let t0 = Instant::now();
    let mut omega = omega0.values().to_vec();
    let mut rows = Vec::with_capacity(cfg.outer_iters + 1);
    let mut z = vec![0.0f64; nv];
    let mut g_prev: Vec<f64> = Vec::new();
    let mut prev_pg = 0.0f64;
    let mut psi = cost_psi(prob.cache, &omega, prob.reg, prob.beta).psi;
    let mut last_step = 0.0;
    let mut last_nnz: Option<usize> = None;
    let mut last_note: Option<String> = None;

    for i in 0..=cfg.outer_iters {
        let g = grad_psi(prob.cache, &omega, prob.reg, prob.beta);
        check_finite(&g, "gradient")?;
        if !psi.is_finite() {
            return Err(Error::NonFinite("cost".into()));
        }
        let gnorm = l2(&g);
        rows.push(record_row(
            prob,
            refs,
            i,
            t0,
            &omega,
            psi,
            gnorm,
            last_step,
            last_nnz.take(),
            last_note.take(),
        ));
        if i == cfg.outer_iters {
            break;
        }
        if let Some(tol) = cfg.grad_tol {
            if sup_norm(&g) < tol {
                break;
            }
        }
        if gnorm == 0.0 {
            break;
        }

        let (p, nnz, note) =
            preconditioned_direction(prob, cfg, &reg_matrix, &reg_diag, &omega, &g)?;

        // Polak-Ribiere-plus with the preconditioned inner products.
        let mu = if i == 0 || prev_pg == 0.0 {
            0.0
        } else {
            let num: f64 = p
                .iter()
                .zip(g.iter().zip(&g_prev))
                .map(|(pj, (gj, gp))| pj * (gj - gp))
                .sum();
            (num / prev_pg).max(0.0)
        };
        for (zj, pj) in z.iter_mut().zip(&p) {
            *zj = pj + mu * *zj;
        }
        let zg: f64 = z.iter().zip(&g).map(|(a, b)| a * b).sum();
        if cfg.restart == RestartPolicy::DescentReset && zg >= 0.0 {
            z.copy_from_slice(&p);
        }
        debug_assert!(
            z.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() < 0.0,
            "search direction is not a descent direction"
        );
        prev_pg = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        g_prev = g;

        let restriction = LineRestriction::new(prob.cache, prob.reg, prob.beta, &omega, &z);
        let ls = line_search(&restriction, cfg.inner_iters);
        for (wj, zj) in omega.iter_mut().zip(&z) {
            *wj += ls.alpha * zj;
        }
        psi = cost_psi(prob.cache, &omega, prob.reg, prob.beta).psi;
        last_step = ls.alpha;
        last_nnz = nnz;
        last_note = note;
    }

    let field = FieldMap::new(omega, prob.cache.mask())?;
    Ok((
        field,
        IterationLog {
            method: cfg.preconditioner.label().to_string(),
            rows,
        },
    ))
}

/// Diagonal quadratic-majorizer baseline: each iteration steps
/// `w -= grad / (d_max + m)` where `d_max` is the constant curvature
/// bound of the data term and `m` the Gershgorin bound of the
/// regularizer, so the cost decreases monotonically.
pub fn qm_baseline(
    prob: &FieldmapProblem,
    omega0: &FieldMap,
    cfg: &SolverConfig,
    refs: &ReferenceMaps,
) -> Result<(FieldMap, IterationLog)> {
    cfg.validate()?;
    if !same_mask(prob.cache.mask(), omega0.mask())
        || !same_mask(prob.cache.mask(), prob.reg.mask())
    {
        return Err(Error::InvalidMask(
            "cache, regularizer, and initial field map masks differ".into(),
        ));
    }
    let d_max = curvature_upper_bound(prob.cache);
    let m = prob.reg.diag_majorizer(prob.beta)?;
    let denom: Vec<f64> = d_max.iter().zip(&m).map(|(a, b)| a + b).collect();

    let t0 = Instant::now();
    let mut omega = omega0.values().to_vec();
    let mut rows = Vec::with_capacity(cfg.outer_iters + 1);
    let mut psi = cost_psi(prob.cache, &omega, prob.reg, prob.beta).psi;

    for i in 0..=cfg.outer_iters {
        let g = grad_psi(prob.cache, &omega, prob.reg, prob.beta);
        check_finite(&g, "gradient")?;
        let gnorm = l2(&g);
        rows.push(record_row(
            prob,
            refs,
            i,
            t0,
            &omega,
            psi,
            gnorm,
            if i == 0 { 0.0 } else { 1.0 },
            None,
            None,
        ));
        if i == cfg.outer_iters {
            break;
        }
        if let Some(tol) = cfg.grad_tol {
            if sup_norm(&g) < tol {
                break;
            }
        }
        for j in 0..omega.len() {
            if denom[j] > 0.0 {
                omega[j] -= g[j] / denom[j];
            }
        }
        psi = cost_psi(prob.cache, &omega, prob.reg, prob.beta).psi;
    }

    let field = FieldMap::new(omega, prob.cache.mask())?;
    Ok((
        field,
        IterationLog {
            method: "qm".to_string(),
            rows,
        },
    ))
}
