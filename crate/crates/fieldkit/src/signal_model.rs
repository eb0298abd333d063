//! Acquisition model for multi-echo multi-coil MRI and the
//! precomputation that makes the eliminated-image cost cheap.
//!
//! The model for voxel `j`, coil `c`, echo `l` is
//! `y_clj = exp(i w_j t_l) s_cj x_lj + noise`, where `x_lj` is either a
//! single magnetization image (field map estimation) or a water/fat
//! combination through the signal basis (water-fat imaging).
//!
//! Eliminating `x` gives a cost that is a sum over echo pairs of
//! `|r| (1 - cos(angle(r) + w (t_m - t_n)))` terms. The pair-term
//! cache stores the coil-weighted images `w_clj = conj(s_cj) y_clj`
//! and their coil sums so that any `r_{cdmnj}` can be formed in O(1),
//! plus the coil-collapsed sums `R` and `K0` used by the cost and
//! gradient. The full `(Nc^2, L^2, Nv)` array of `r` terms is never
//! materialized.

use crate::error::{Error, Result};
use crate::volume::{Dims, Mask};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Estimation mode: plain field map or water-fat imaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fieldmap,
    Waterfat,
}

/// Echo time shifts in seconds, strictly increasing, with all pairwise
/// differences `t_m - t_n` (m < n) cached.
#[derive(Debug, Clone)]
pub struct EchoTimes {
    times: Vec<f64>,
    pairs: Vec<EchoPair>,
}

/// One ordered echo pair `m < n` with `dt = t_m - t_n` (negative).
#[derive(Debug, Clone, Copy)]
pub struct EchoPair {
    pub m: usize,
    pub n: usize,
    pub dt: f64,
}

impl EchoTimes {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 echo times, got {}",
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("echo times".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "echo times must be strictly increasing".into(),
            ));
        }
        let mut pairs = Vec::new();
        for m in 0..times.len() {
            for n in (m + 1)..times.len() {
                pairs.push(EchoPair {
                    m,
                    n,
                    dt: times[m] - times[n],
                });
            }
        }
        Ok(EchoTimes { times, pairs })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn pairs(&self) -> &[EchoPair] {
        &self.pairs
    }

    /// Smallest nonzero |t_m - t_n|; sets the period of the cost in w.
    pub fn min_abs_dt(&self) -> f64 {
        self.pairs
            .iter()
            .map(|p| p.dt.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Complex image stack indexed by (coil, echo, voxel), x-fastest voxel
/// order, one contiguous volume per (coil, echo) plane.
#[derive(Debug, Clone)]
pub struct MultiEchoImages {
    data: Vec<Complex64>,
    n_coils: usize,
    n_echoes: usize,
    dims: Dims,
}

impl MultiEchoImages {
    pub fn new(dims: Dims, n_coils: usize, n_echoes: usize, data: Vec<Complex64>) -> Result<Self> {
        if n_coils < 1 || n_echoes < 2 {
            return Err(Error::InvalidArgument(
                "need n_coils >= 1 and n_echoes >= 2".into(),
            ));
        }
        if data.len() != n_coils * n_echoes * dims.n_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "image stack has {} values, expected {}",
                data.len(),
                n_coils * n_echoes * dims.n_voxels()
            )));
        }
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("image stack".into()));
        }
        Ok(MultiEchoImages {
            data,
            n_coils,
            n_echoes,
            dims,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn n_echoes(&self) -> usize {
        self.n_echoes
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, l: usize, j: usize) -> Complex64 {
        self.data[(c * self.n_echoes + l) * self.dims.n_voxels() + j]
    }

    /// Contiguous volume for one (coil, echo) plane.
    pub fn volume(&self, c: usize, l: usize) -> &[Complex64] {
        let nv = self.dims.n_voxels();
        let off = (c * self.n_echoes + l) * nv;
        &self.data[off..off + nv]
    }

    /// Total signal energy `sum |y|^2`.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Scale every sample by a complex factor.
    pub fn scaled(&self, factor: Complex64) -> MultiEchoImages {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= factor;
        }
        out
    }
}

/// Known coil sensitivity maps with the per-voxel sum of squares.
#[derive(Debug, Clone)]
pub struct SensitivityMaps {
    data: Vec<Complex64>,
    ssq: Vec<f64>,
    n_coils: usize,
    dims: Dims,
}

impl SensitivityMaps {
    pub fn new(dims: Dims, n_coils: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != n_coils * dims.n_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "sensitivity maps have {} values, expected {}",
                data.len(),
                n_coils * dims.n_voxels()
            )));
        }
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("sensitivity maps".into()));
        }
        let nv = dims.n_voxels();
        let mut ssq = vec![0.0; nv];
        for c in 0..n_coils {
            for j in 0..nv {
                ssq[j] += data[c * nv + j].norm_sqr();
            }
        }
        Ok(SensitivityMaps {
            data,
            ssq,
            n_coils,
            dims,
        })
    }

    /// All-ones maps for the single-coil / pre-combined case.
    pub fn uniform(dims: Dims, n_coils: usize) -> Self {
        let nv = dims.n_voxels();
        SensitivityMaps {
            data: vec![Complex64::new(1.0, 0.0); n_coils * nv],
            ssq: vec![n_coils as f64; nv],
            n_coils,
            dims,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, j: usize) -> Complex64 {
        self.data[c * self.dims.n_voxels() + j]
    }

    pub fn coil(&self, c: usize) -> &[Complex64] {
        let nv = self.dims.n_voxels();
        &self.data[c * nv..(c + 1) * nv]
    }

    /// Per-voxel `sum_c |s_cj|^2`.
    pub fn ssq(&self) -> &[f64] {
        &self.ssq
    }
}

/// Multipeak fat spectrum: relative amplitudes (normalized to sum to
/// one) and frequency shifts in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatModel {
    peaks: Vec<FatPeak>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FatPeak {
    pub amplitude: f64,
    pub freq_hz: f64,
}

impl FatModel {
    pub fn new(peaks: Vec<FatPeak>) -> Result<Self> {
        if peaks.is_empty() {
            return Err(Error::InvalidArgument("fat model needs >= 1 peak".into()));
        }
        if peaks
            .iter()
            .any(|p| !p.amplitude.is_finite() || !p.freq_hz.is_finite() || p.amplitude < 0.0)
        {
            return Err(Error::InvalidArgument(
                "fat peak amplitudes must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = peaks.iter().map(|p| p.amplitude).sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(
                "fat peak amplitudes must sum to a positive value".into(),
            ));
        }
        let peaks = peaks
            .into_iter()
            .map(|p| FatPeak {
                amplitude: p.amplitude / total,
                freq_hz: p.freq_hz,
            })
            .collect();
        Ok(FatModel { peaks })
    }

    /// Single-peak model at the given chemical shift.
    pub fn single_peak(freq_hz: f64) -> Self {
        FatModel {
            peaks: vec![FatPeak {
                amplitude: 1.0,
                freq_hz,
            }],
        }
    }

    /// Common six-peak fat spectrum; `larmor_mhz` converts the ppm
    /// shifts to Hz (e.g. ~63.87 at 1.5 T, ~127.74 at 3 T).
    pub fn standard_six_peak(larmor_mhz: f64) -> Self {
        const PPM: [f64; 6] = [-3.80, -3.40, -2.60, -1.94, -0.39, 0.60];
        const AMP: [f64; 6] = [0.087, 0.693, 0.128, 0.004, 0.039, 0.048];
        let peaks = PPM
            .iter()
            .zip(AMP.iter())
            .map(|(&ppm, &a)| FatPeak {
                amplitude: a,
                freq_hz: ppm * larmor_mhz,
            })
            .collect();
        FatModel::new(peaks).expect("static peak table is valid")
    }

    pub fn peaks(&self) -> &[FatPeak] {
        &self.peaks
    }

    /// Amplitude-weighted mean shift `sum_p a_p df_p` in Hz; reduces
    /// to the single shift for one peak. Used as the sweep range.
    pub fn mean_shift_hz(&self) -> f64 {
        self.peaks.iter().map(|p| p.amplitude * p.freq_hz).sum()
    }

    /// Basis entry for echo time `t`: `sum_p a_p exp(i 2 pi df_p t)`.
    pub fn basis_value(&self, t: f64) -> Complex64 {
        self.peaks
            .iter()
            .map(|p| Complex64::from_polar(p.amplitude, 2.0 * std::f64::consts::PI * p.freq_hz * t))
            .sum()
    }
}

/// Signal basis `gamma` (L x K, K = 1 for field map mode, K = 2 for
/// water-fat mode) together with the orthogonal projector
/// `Gamma = gamma (gamma' gamma)^-1 gamma'` onto its column space.
#[derive(Debug, Clone)]
pub struct SignalBasis {
    mode: Mode,
    n_echoes: usize,
    k: usize,
    /// Column-major L x K.
    gamma: Vec<Complex64>,
    /// Row-major L x L Hermitian projector.
    projector: Vec<Complex64>,
    /// Gram matrix gamma' gamma, row-major K x K.
    gram: [Complex64; 4],
    fat: Option<FatModel>,
}

/// Builds the signal basis for the requested mode. The projector is
/// computed by solving the K x K Hermitian normal system (K <= 2)
/// rather than forming an explicit inverse.
pub fn build_gamma(mode: Mode, times: &EchoTimes, fat: Option<&FatModel>) -> Result<SignalBasis> {
    let l = times.len();
    match mode {
        Mode::Fieldmap => {
            if fat.is_some() {
                return Err(Error::InvalidArgument(
                    "fat model is only used in water-fat mode".into(),
                ));
            }
            let gamma = vec![Complex64::new(1.0, 0.0); l];
            // gamma'gamma = L, so the projector is exactly 1/L.
            let projector = vec![Complex64::new(1.0 / l as f64, 0.0); l * l];
            let mut gram = [Complex64::new(0.0, 0.0); 4];
            gram[0] = Complex64::new(l as f64, 0.0);
            Ok(SignalBasis {
                mode,
                n_echoes: l,
                k: 1,
                gamma,
                projector,
                gram,
                fat: None,
            })
        }
        Mode::Waterfat => {
            let fat = fat.ok_or_else(|| {
                Error::InvalidArgument("water-fat mode requires a fat model".into())
            })?;
            let mut gamma = vec![Complex64::new(1.0, 0.0); 2 * l];
            for (i, &t) in times.times().iter().enumerate() {
                gamma[l + i] = fat.basis_value(t);
            }
            // Hermitian Gram matrix of the two columns.
            let col0 = &gamma[0..l];
            let col1 = &gamma[l..2 * l];
            let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 {
                a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
            };
            let g00 = dot(col0, col0);
            let g01 = dot(col0, col1);
            let g11 = dot(col1, col1);
            let det = g00.re * g11.re - g01.norm_sqr();
            if det <= 1e-12 * g00.re * g11.re || g00.re <= 0.0 || g11.re <= 0.0 {
                return Err(Error::DegenerateBasis);
            }
            // X = (gamma'gamma)^-1 gamma' (K x L), then Gamma = gamma X.
            let mut projector = vec![Complex64::new(0.0, 0.0); l * l];
            for n in 0..l {
                // Solve the 2x2 Hermitian system for column n of gamma'.
                let b0 = col0[n].conj();
                let b1 = col1[n].conj();
                let x0 = (g11.re * b0 - g01 * b1) / det;
                let x1 = (g00.re * b1 - g01.conj() * b0) / det;
                for m in 0..l {
                    projector[m * l + n] = col0[m] * x0 + col1[m] * x1;
                }
            }
            Ok(SignalBasis {
                mode,
                n_echoes: l,
                k: 2,
                gamma,
                projector,
                gram: [g00, g01, g01.conj(), g11],
                fat: Some(fat.clone()),
            })
        }
    }
}

impl SignalBasis {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn n_echoes(&self) -> usize {
        self.n_echoes
    }

    /// Number of basis columns (1 or 2).
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn gamma_entry(&self, l: usize, k: usize) -> Complex64 {
        self.gamma[k * self.n_echoes + l]
    }

    #[inline]
    pub fn projector_entry(&self, m: usize, n: usize) -> Complex64 {
        self.projector[m * self.n_echoes + n]
    }

    /// Gram matrix `gamma' gamma`, row-major K x K (entries beyond
    /// K x K are zero).
    pub fn gram(&self) -> &[Complex64; 4] {
        &self.gram
    }

    pub fn fat_model(&self) -> Option<&FatModel> {
        self.fat.as_ref()
    }

    /// Mixing weight of component k at echo l (the basis entry).
    pub fn component_weight(&self, l: usize, k: usize) -> Complex64 {
        self.gamma_entry(l, k)
    }
}

/// Precomputed per-voxel terms shared by every cost, gradient, and
/// curvature evaluation.
#[derive(Debug, Clone)]
pub struct PairTermCache {
    /// Coil-weighted images `w_clj = conj(s_cj) y_clj`, (Nc, L, Nv).
    w: Vec<Complex64>,
    /// Coil sums `z_lj = sum_c w_clj`, (L, Nv).
    z: Vec<Complex64>,
    /// Per-voxel `sum_c |s_cj|^2`.
    ssq: Vec<f64>,
    /// Coil-collapsed `R_mnj = sum_cd r_cdmnj` per echo pair, (P, Nv).
    r_sum: Vec<Complex64>,
    /// Coil-collapsed `K0_mnj = sum_cd |r_cdmnj|` per echo pair, (P, Nv).
    k0: Vec<f64>,
    /// Per-voxel cost constant from the m = n terms.
    c0: Vec<f64>,
    /// Per-voxel `sum_m K0_mmj` (same-echo magnitude sum).
    k0_same_echo: Vec<f64>,
    n_coils: usize,
    basis: SignalBasis,
    times: EchoTimes,
    mask: Arc<Mask>,
}

/// Builds the pair-term cache for masked voxels; unmasked voxels carry
/// zeros everywhere.
pub fn precompute_cache(
    y: &MultiEchoImages,
    s: &SensitivityMaps,
    basis: &SignalBasis,
    times: &EchoTimes,
    mask: &Arc<Mask>,
) -> Result<PairTermCache> {
    let dims = y.dims();
    let nv = dims.n_voxels();
    let nc = y.n_coils();
    let l = y.n_echoes();
    if s.dims() != dims || mask.dims() != dims {
        return Err(Error::ShapeMismatch(
            "images, sensitivities, and mask must share dimensions".into(),
        ));
    }
    if s.n_coils() != nc {
        return Err(Error::ShapeMismatch(format!(
            "{} coils in images vs {} in sensitivities",
            nc,
            s.n_coils()
        )));
    }
    if basis.n_echoes() != l || times.len() != l {
        return Err(Error::ShapeMismatch(format!(
            "{} echoes in images vs {} in basis / {} echo times",
            l,
            basis.n_echoes(),
            times.len()
        )));
    }
    if mask.is_empty() {
        return Err(Error::InvalidMask("no voxels in mask".into()));
    }
    let ssq = s.ssq();
    for &j in mask.indices() {
        if ssq[j] <= 0.0 {
            return Err(Error::InvalidMask(format!(
                "masked voxel {j} has zero coil sensitivity"
            )));
        }
    }

    // w planes, one per (coil, echo).
    let mut w = vec![Complex64::new(0.0, 0.0); nc * l * nv];
    w.par_chunks_mut(nv).enumerate().for_each(|(plane, out)| {
        let c = plane / l;
        let le = plane % l;
        let yv = y.volume(c, le);
        let sv = s.coil(c);
        for &j in mask.indices() {
            out[j] = sv[j].conj() * yv[j];
        }
    });

    // Coil sums z and per-echo magnitude sums.
    let mut z = vec![Complex64::new(0.0, 0.0); l * nv];
    let mut wabs = vec![0.0f64; l * nv];
    z.par_chunks_mut(nv)
        .zip(wabs.par_chunks_mut(nv))
        .enumerate()
        .for_each(|(le, (zout, aout))| {
            for c in 0..nc {
                let plane = &w[(c * l + le) * nv..(c * l + le + 1) * nv];
                for &j in mask.indices() {
                    zout[j] += plane[j];
                    aout[j] += plane[j].norm();
                }
            }
        });

    // Collapsed pair terms.
    let pairs = times.pairs();
    let mut r_sum = vec![Complex64::new(0.0, 0.0); pairs.len() * nv];
    let mut k0 = vec![0.0f64; pairs.len() * nv];
    r_sum
        .par_chunks_mut(nv)
        .zip(k0.par_chunks_mut(nv))
        .enumerate()
        .for_each(|(p, (rout, kout))| {
            let pair = pairs[p];
            let g = basis.projector_entry(pair.m, pair.n);
            let ga = g.norm();
            let zm = &z[pair.m * nv..(pair.m + 1) * nv];
            let zn = &z[pair.n * nv..(pair.n + 1) * nv];
            let am = &wabs[pair.m * nv..(pair.m + 1) * nv];
            let an = &wabs[pair.n * nv..(pair.n + 1) * nv];
            for &j in mask.indices() {
                let inv = 1.0 / ssq[j];
                rout[j] = g * inv * zm[j].conj() * zn[j];
                kout[j] = ga * inv * am[j] * an[j];
            }
        });

    // Same-echo constants.
    let mut c0 = vec![0.0f64; nv];
    let mut k0_same_echo = vec![0.0f64; nv];
    for m in 0..l {
        let gmm = basis.projector_entry(m, m).re;
        let zm = &z[m * nv..(m + 1) * nv];
        let am = &wabs[m * nv..(m + 1) * nv];
        for &j in mask.indices() {
            let inv = 1.0 / ssq[j];
            let kmm = gmm * inv * am[j] * am[j];
            k0_same_echo[j] += kmm;
            c0[j] += kmm - gmm * inv * zm[j].norm_sqr();
        }
    }

    Ok(PairTermCache {
        w,
        z,
        ssq: ssq.to_vec(),
        r_sum,
        k0,
        c0,
        k0_same_echo,
        n_coils: nc,
        basis: basis.clone(),
        times: times.clone(),
        mask: Arc::clone(mask),
    })
}

impl PairTermCache {
    pub fn dims(&self) -> Dims {
        self.mask.dims()
    }

    pub fn n_voxels(&self) -> usize {
        self.mask.dims().n_voxels()
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn n_echoes(&self) -> usize {
        self.times.len()
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    pub fn basis(&self) -> &SignalBasis {
        &self.basis
    }

    pub fn times(&self) -> &EchoTimes {
        &self.times
    }

    #[inline]
    pub fn w_at(&self, c: usize, l: usize, j: usize) -> Complex64 {
        self.w[(c * self.times.len() + l) * self.n_voxels() + j]
    }

    #[inline]
    pub fn z_at(&self, l: usize, j: usize) -> Complex64 {
        self.z[l * self.n_voxels() + j]
    }

    pub fn ssq(&self) -> &[f64] {
        &self.ssq
    }

    /// Coil-collapsed `R` for pair index `p` (order of
    /// [`EchoTimes::pairs`]).
    pub fn r_sum_pair(&self, p: usize) -> &[Complex64] {
        let nv = self.n_voxels();
        &self.r_sum[p * nv..(p + 1) * nv]
    }

    /// Coil-collapsed `K0` for pair index `p`.
    pub fn k0_pair(&self, p: usize) -> &[f64] {
        let nv = self.n_voxels();
        &self.k0[p * nv..(p + 1) * nv]
    }

    /// Per-voxel constant collecting the m = n cost terms.
    pub fn c0(&self) -> &[f64] {
        &self.c0
    }

    /// Reconstructs a single `r_{cdmnj}` from the stored `w` images.
    #[inline]
    pub fn r_term(&self, c: usize, d: usize, m: usize, n: usize, j: usize) -> Complex64 {
        if !self.mask.contains(j) {
            return Complex64::new(0.0, 0.0);
        }
        self.basis.projector_entry(m, n) / self.ssq[j] * self.w_at(c, m, j).conj()
            * self.w_at(d, n, j)
    }

    /// PWLS data weights `rho_j = sum over all (c,d,m,n) of |r|`.
    pub fn pwls_weights(&self) -> Vec<f64> {
        let nv = self.n_voxels();
        let mut rho = self.k0_same_echo.clone();
        for p in 0..self.times.pairs().len() {
            let k0p = self.k0_pair(p);
            for &j in self.mask.indices() {
                rho[j] += 2.0 * k0p[j];
            }
        }
        debug_assert_eq!(rho.len(), nv);
        rho
    }
}

/// Input images for the forward model.
pub enum ComponentSource<'a> {
    /// Field-map mode: one magnetization image.
    Magnetization(&'a [Complex64]),
    /// Water-fat mode: water and fat component images.
    WaterFat {
        water: &'a [Complex64],
        fat: &'a [Complex64],
    },
}

/// Noise-free forward model `y_clj = exp(i w_j t_l) s_cj x_lj`.
pub fn forward_model(
    x: &ComponentSource,
    omega: &[f64],
    s: &SensitivityMaps,
    times: &EchoTimes,
    basis: &SignalBasis,
) -> Result<MultiEchoImages> {
    let dims = s.dims();
    let nv = dims.n_voxels();
    let nc = s.n_coils();
    let l = times.len();
    if omega.len() != nv {
        return Err(Error::ShapeMismatch(format!(
            "field map has {} voxels, expected {nv}",
            omega.len()
        )));
    }
    match (x, basis.mode()) {
        (ComponentSource::Magnetization(m), Mode::Fieldmap) => {
            if m.len() != nv {
                return Err(Error::ShapeMismatch("magnetization image size".into()));
            }
        }
        (ComponentSource::WaterFat { water, fat }, Mode::Waterfat) => {
            if water.len() != nv || fat.len() != nv {
                return Err(Error::ShapeMismatch("component image size".into()));
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "component images do not match the basis mode".into(),
            ))
        }
    }

    let mut data = vec![Complex64::new(0.0, 0.0); nc * l * nv];
    data.par_chunks_mut(nv).enumerate().for_each(|(plane, out)| {
        let c = plane / l;
        let le = plane % l;
        let t = times.times()[le];
        let sv = s.coil(c);
        for j in 0..nv {
            let xlj = match x {
                ComponentSource::Magnetization(m) => m[j],
                ComponentSource::WaterFat { water, fat } => {
                    water[j] + fat[j] * basis.gamma_entry(le, 1)
                }
            };
            out[j] = Complex64::from_polar(1.0, omega[j] * t) * sv[j] * xlj;
        }
    });
    MultiEchoImages::new(dims, nc, l, data)
}
