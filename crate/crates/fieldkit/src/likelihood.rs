//! Eliminated-image negative log-likelihood: cost, gradient, optimal
//! curvatures, and the closed-form image given the field map.
//!
//! With the image variable eliminated, each voxel contributes
//! `c0_j + sum over echo pairs of 2 (K0 - Re(R exp(i w_j dt)))`,
//! which the pair-term cache makes O(pairs) per voxel. The gradient
//! uses the same coil-collapsed sums. Curvatures need the individual
//! `|r|` magnitudes, so they run over (coil, coil) pairs on the fly;
//! the curvature of `1 - cos` at expansion point `u` is `sin(u)/u`
//! with `u` wrapped into (-pi, pi], the tightest quadratic majorizer.

use crate::error::{Error, Result};
use crate::par_block_sum;
use crate::regularizer::DifferenceOperator;
use crate::signal_model::{Mode, PairTermCache, SignalBasis};
use crate::volume::Mask;
use num_complex::Complex64;
use rayon::prelude::*;
use std::sync::Arc;

/// Per-voxel off-resonance in rad/s, zero outside the mask.
#[derive(Debug, Clone)]
pub struct FieldMap {
    values: Vec<f64>,
    mask: Arc<Mask>,
}

impl FieldMap {
    /// Wraps raw values, zeroing anything outside the mask.
    pub fn new(values: Vec<f64>, mask: &Arc<Mask>) -> Result<Self> {
        if values.len() != mask.dims().n_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "field map has {} values for {} voxels",
                values.len(),
                mask.dims().n_voxels()
            )));
        }
        let mut values = values;
        for (j, v) in values.iter_mut().enumerate() {
            if !mask.contains(j) {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::NonFinite(format!("field map voxel {j}")));
            }
        }
        Ok(FieldMap {
            values,
            mask: Arc::clone(mask),
        })
    }

    pub fn zeros(mask: &Arc<Mask>) -> Self {
        FieldMap {
            values: vec![0.0; mask.dims().n_voxels()],
            mask: Arc::clone(mask),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    /// Values converted to Hz.
    pub fn to_hz(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v / (2.0 * std::f64::consts::PI))
            .collect()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Cost breakdown at one iterate.
#[derive(Debug, Clone, Copy)]
pub struct CostReport {
    /// Data term including the field-independent constant.
    pub phi: f64,
    /// `||C w||^2`.
    pub reg_norm_sq: f64,
    pub beta: f64,
    /// `phi + beta/2 * reg_norm_sq`.
    pub psi: f64,
}

pub(crate) fn same_mask(a: &Arc<Mask>, b: &Arc<Mask>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Data term of the penalized likelihood.
pub fn cost_phi(cache: &PairTermCache, omega: &[f64]) -> f64 {
    let nv = cache.n_voxels();
    assert_eq!(omega.len(), nv, "field map/cache size");
    let flags = cache.mask().flags();
    let pairs = cache.times().pairs();
    let c0 = cache.c0();
    par_block_sum(nv, |range| {
        let mut acc = 0.0;
        for j in range {
            if !flags[j] {
                continue;
            }
            let mut vox = c0[j];
            for (p, pair) in pairs.iter().enumerate() {
                let r = cache.r_sum_pair(p)[j];
                let k0 = cache.k0_pair(p)[j];
                let rot = r * Complex64::from_polar(1.0, omega[j] * pair.dt);
                vox += 2.0 * (k0 - rot.re);
            }
            acc += vox;
        }
        acc
    })
}

/// Full penalized cost `phi + beta/2 ||C w||^2`.
pub fn cost_psi(
    cache: &PairTermCache,
    omega: &[f64],
    reg: &DifferenceOperator,
    beta: f64,
) -> CostReport {
    assert!(beta >= 0.0, "beta must be nonnegative");
    assert!(
        same_mask(cache.mask(), reg.mask()),
        "cache and regularizer masks differ"
    );
    let phi = cost_phi(cache, omega);
    let reg_norm_sq = reg.penalty_norm_sq(omega);
    CostReport {
        phi,
        reg_norm_sq,
        beta,
        psi: phi + 0.5 * beta * reg_norm_sq,
    }
}

/// Gradient of the data term alone.
pub fn grad_phi(cache: &PairTermCache, omega: &[f64]) -> Vec<f64> {
    let nv = cache.n_voxels();
    assert_eq!(omega.len(), nv, "field map/cache size");
    let flags = cache.mask().flags();
    let pairs = cache.times().pairs();
    let mut g = vec![0.0; nv];
    const BLOCK: usize = 4096;
    g.par_chunks_mut(BLOCK).enumerate().for_each(|(b, out)| {
        let base = b * BLOCK;
        for (off, gj) in out.iter_mut().enumerate() {
            let j = base + off;
            if !flags[j] {
                continue;
            }
            let mut acc = 0.0;
            for (p, pair) in pairs.iter().enumerate() {
                let r = cache.r_sum_pair(p)[j];
                let rot = r * Complex64::from_polar(1.0, omega[j] * pair.dt);
                acc += 2.0 * pair.dt * rot.im;
            }
            *gj = acc;
        }
    });
    g
}

/// Gradient of the penalized cost: `grad phi + beta C'C w`.
pub fn grad_psi(
    cache: &PairTermCache,
    omega: &[f64],
    reg: &DifferenceOperator,
    beta: f64,
) -> Vec<f64> {
    assert!(beta >= 0.0, "beta must be nonnegative");
    assert!(
        same_mask(cache.mask(), reg.mask()),
        "cache and regularizer masks differ"
    );
    let mut g = grad_phi(cache, omega);
    if beta > 0.0 {
        let ctc = reg.apply_adjoint(&reg.apply(omega));
        for (gj, c) in g.iter_mut().zip(&ctc) {
            *gj += beta * c;
        }
    }
    g
}

#[inline]
fn sinc_guarded(u: f64) -> f64 {
    if u.abs() < 1e-9 {
        1.0 - u * u / 6.0
    } else {
        u.sin() / u
    }
}

/// Optimal-curvature contribution of one pair term: `|r| dt^2 sinc(u)`
/// where `u = angle(r) + theta * dt`, wrapped by the complex argument.
#[inline]
fn huber_term(r: Complex64, theta: f64, dt: f64) -> f64 {
    let q = r * Complex64::from_polar(1.0, theta * dt);
    dt * dt * q.norm() * sinc_guarded(q.arg())
}

fn voxel_curvature(cache: &PairTermCache, j: usize, theta: f64) -> f64 {
    let nc = cache.n_coils();
    let pairs = cache.times().pairs();
    let ssq_inv = 1.0 / cache.ssq()[j];
    let mut d = 0.0;
    for pair in pairs {
        let g = cache.basis().projector_entry(pair.m, pair.n);
        for c in 0..nc {
            let wcm = cache.w_at(c, pair.m, j).conj();
            for cd in 0..nc {
                let r = g * ssq_inv * wcm * cache.w_at(cd, pair.n, j);
                d += 2.0 * huber_term(r, theta, pair.dt);
            }
        }
    }
    d
}

/// Per-voxel optimal curvatures of the data term at the given
/// expansion point, `d_j >= 0`. Runs over individual coil pairs since
/// the curvature is nonlinear in each `|r|`.
pub fn curvatures(cache: &PairTermCache, omega_eval: &[f64]) -> Vec<f64> {
    let nv = cache.n_voxels();
    assert_eq!(omega_eval.len(), nv, "field map/cache size");
    let flags = cache.mask().flags();
    let mut d = vec![0.0; nv];
    const BLOCK: usize = 2048;
    d.par_chunks_mut(BLOCK).enumerate().for_each(|(b, out)| {
        let base = b * BLOCK;
        for (off, dj) in out.iter_mut().enumerate() {
            let j = base + off;
            if !flags[j] {
                continue;
            }
            *dj = voxel_curvature(cache, j, omega_eval[j]).max(0.0);
        }
    });
    d
}

/// Curvature upper bound `sum 2 |r| dt^2` (the sinc factor at its
/// maximum); constant across iterates, used by the diagonal-majorizer
/// baseline.
pub fn curvature_upper_bound(cache: &PairTermCache) -> Vec<f64> {
    let nv = cache.n_voxels();
    let mut d = vec![0.0; nv];
    for (p, pair) in cache.times().pairs().iter().enumerate() {
        let k0 = cache.k0_pair(p);
        let w = 2.0 * pair.dt * pair.dt;
        for &j in cache.mask().indices() {
            d[j] += w * k0[j];
        }
    }
    d
}

/// Directional derivative and majorizer curvature of the data term
/// restricted to the line `w + alpha z`, evaluated at `alpha`:
/// returns `(z . grad phi, sum_j z_j^2 d_j)` in one fused pass.
pub fn line_derivative_and_curvature(
    cache: &PairTermCache,
    omega: &[f64],
    dir: &[f64],
    alpha: f64,
) -> (f64, f64) {
    let nv = cache.n_voxels();
    assert_eq!(omega.len(), nv, "field map/cache size");
    assert_eq!(dir.len(), nv, "direction/cache size");
    let flags = cache.mask().flags();
    let pairs = cache.times().pairs();
    let nc = cache.n_coils();
    let n_blocks = nv.div_ceil(2048);
    let partials: Vec<(f64, f64)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let range = b * 2048..((b + 1) * 2048).min(nv);
            let mut fp = 0.0;
            let mut dd = 0.0;
            for j in range {
                if !flags[j] || dir[j] == 0.0 {
                    continue;
                }
                let theta = omega[j] + alpha * dir[j];
                let ssq_inv = 1.0 / cache.ssq()[j];
                let mut gj = 0.0;
                let mut dj = 0.0;
                for (p, pair) in pairs.iter().enumerate() {
                    let rot = Complex64::from_polar(1.0, theta * pair.dt);
                    let rsum = cache.r_sum_pair(p)[j] * rot;
                    gj += 2.0 * pair.dt * rsum.im;
                    let g = cache.basis().projector_entry(pair.m, pair.n);
                    for c in 0..nc {
                        let wcm = cache.w_at(c, pair.m, j).conj();
                        for cd in 0..nc {
                            let r = g * ssq_inv * wcm * cache.w_at(cd, pair.n, j);
                            let q = r * rot;
                            let u = q.arg();
                            let k = if u.abs() < 1e-9 {
                                q.norm() * (1.0 - u * u / 6.0)
                            } else {
                                q.im / u
                            };
                            dj += 2.0 * pair.dt * pair.dt * k;
                        }
                    }
                }
                fp += dir[j] * gj;
                dd += dir[j] * dir[j] * dj.max(0.0);
            }
            (fp, dd)
        })
        .collect();
    partials
        .iter()
        .fold((0.0, 0.0), |(a, b), &(c, d)| (a + c, b + d))
}

/// Component images recovered by the per-voxel least-squares fit.
#[derive(Debug, Clone)]
pub struct MlImages {
    k: usize,
    /// One plane of `n_voxels` values per component.
    images: Vec<Complex64>,
    /// Masked voxels whose per-voxel system was rank deficient.
    pub flagged: Vec<bool>,
}

impl MlImages {
    pub fn n_components(&self) -> usize {
        self.k
    }

    pub fn component(&self, k: usize) -> &[Complex64] {
        let nv = self.images.len() / self.k;
        &self.images[k * nv..(k + 1) * nv]
    }
}

/// Per-voxel component solve shared by [`ml_images`] and the water-fat
/// recovery: given the coil-combined echo values `z_l`, solves the
/// normal equations of the model fit at the supplied field value.
pub(crate) fn solve_voxel_components(
    basis: &SignalBasis,
    times: &[f64],
    z: &[Complex64],
    ssq: f64,
    omega: f64,
) -> ([Complex64; 2], bool) {
    let zero = Complex64::new(0.0, 0.0);
    if ssq <= 0.0 {
        return ([zero, zero], true);
    }
    let l = times.len();
    let k = basis.k();
    // rhs_k = sum_l conj(gamma_lk) exp(-i w t_l) z_l
    let mut rhs = [zero, zero];
    let mut any_signal = false;
    for li in 0..l {
        let v = Complex64::from_polar(1.0, -omega * times[li]) * z[li];
        if z[li] != zero {
            any_signal = true;
        }
        for (ki, r) in rhs.iter_mut().enumerate().take(k) {
            *r += basis.gamma_entry(li, ki).conj() * v;
        }
    }
    if !any_signal {
        return ([zero, zero], true);
    }
    let gram = basis.gram();
    if k == 1 {
        let m = ssq * gram[0].re;
        ([rhs[0] / m, zero], false)
    } else {
        let g00 = ssq * gram[0].re;
        let g01 = gram[1] * ssq;
        let g11 = ssq * gram[3].re;
        let det = g00 * g11 - g01.norm_sqr();
        // Rank test on the smaller eigenvalue of the 2x2 system.
        let tr = g00 + g11;
        let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
        let lam_max = 0.5 * (tr + disc);
        let lam_min = 0.5 * (tr - disc);
        if lam_min <= 1e-10 * lam_max {
            return ([zero, zero], true);
        }
        let q0 = (g11 * rhs[0] - g01 * rhs[1]) / det;
        let q1 = (g00 * rhs[1] - g01.conj() * rhs[0]) / det;
        ([q0, q1], false)
    }
}

/// Closed-form least-squares image(s) given the field map: the
/// minimizer of the model misfit with the field held fixed. In
/// water-fat mode the two components are the water and fat images.
pub fn ml_images(cache: &PairTermCache, omega: &[f64]) -> MlImages {
    let nv = cache.n_voxels();
    assert_eq!(omega.len(), nv, "field map/cache size");
    let k = cache.basis().k();
    let l = cache.n_echoes();
    let times = cache.times().times().to_vec();
    let flags = cache.mask().flags();
    let mut images = vec![Complex64::new(0.0, 0.0); k * nv];
    let mut flagged = vec![false; nv];
    let (first, second) = images.split_at_mut(nv);
    // Sequential over voxels; each solve is a handful of flops.
    let mut zbuf = vec![Complex64::new(0.0, 0.0); l];
    for j in 0..nv {
        if !flags[j] {
            continue;
        }
        for (li, zb) in zbuf.iter_mut().enumerate() {
            *zb = cache.z_at(li, j);
        }
        let (q, flag) =
            solve_voxel_components(cache.basis(), &times, &zbuf, cache.ssq()[j], omega[j]);
        first[j] = q[0];
        if k == 2 {
            second[j] = q[1];
        }
        flagged[j] = flag;
    }
    MlImages {
        k,
        images,
        flagged,
    }
}

/// Evaluates the joint (non-eliminated) misfit at a given image
/// estimate: `sum |y - exp(i w t) s x|^2`. Used to validate that the
/// eliminated cost differs from the joint minimum by a constant.
pub fn joint_misfit(
    y: &crate::signal_model::MultiEchoImages,
    s: &crate::signal_model::SensitivityMaps,
    basis: &SignalBasis,
    times: &[f64],
    omega: &[f64],
    estimate: &MlImages,
    mask: &Mask,
) -> f64 {
    let nv = y.dims().n_voxels();
    let mut acc = 0.0;
    for j in 0..nv {
        if !mask.contains(j) {
            continue;
        }
        for li in 0..y.n_echoes() {
            let xlj = match basis.mode() {
                Mode::Fieldmap => estimate.component(0)[j],
                Mode::Waterfat => {
                    estimate.component(0)[j] + estimate.component(1)[j] * basis.gamma_entry(li, 1)
                }
            };
            let phase = Complex64::from_polar(1.0, omega[j] * times[li]);
            for c in 0..y.n_coils() {
                let model = phase * s.at(c, j) * xlj;
                acc += (y.at(c, li, j) - model).norm_sqr();
            }
        }
    }
    acc
}
