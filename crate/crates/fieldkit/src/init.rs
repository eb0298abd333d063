//! Initial field-map estimates.
//!
//! Field-map mode starts from the phase difference of the first two
//! echoes of the coil-combined images. Water-fat mode sweeps each
//! voxel's data cost over a grid spanning the fat-shift ambiguity
//! range, then smooths the voxelwise winner with a few CG iterations
//! on a penalized weighted least-squares problem whose weights are
//! the total pair-term magnitudes.

use crate::error::{Error, Result};
use crate::likelihood::FieldMap;
use crate::regularizer::DifferenceOperator;
use crate::signal_model::{
    EchoTimes, Mode, MultiEchoImages, PairTermCache, SensitivityMaps,
};
use crate::volume::Mask;
use num_complex::Complex64;
use rayon::prelude::*;
use std::sync::Arc;

/// Configuration for the water-fat initializer.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Grid points across the sweep range (endpoints inclusive).
    pub grid_size: usize,
    /// Half-range override in Hz; derived from the fat model when
    /// absent (half the amplitude-weighted mean shift).
    pub range_hz: Option<f64>,
    /// CG iterations for the PWLS smoothing stage.
    pub cg_iters: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid_size: 100,
            range_hz: None,
            cg_iters: 10,
        }
    }
}

/// Two-echo initializer: per-voxel phase of the product of the
/// coil-combined first and second echoes divided by the echo spacing.
pub fn init_two_echo(
    y: &MultiEchoImages,
    s: &SensitivityMaps,
    times: &EchoTimes,
    mask: &Arc<Mask>,
) -> Result<FieldMap> {
    let dims = y.dims();
    if s.dims() != dims || mask.dims() != dims {
        return Err(Error::ShapeMismatch(
            "images, sensitivities, and mask must share dimensions".into(),
        ));
    }
    if s.n_coils() != y.n_coils() {
        return Err(Error::ShapeMismatch("coil counts differ".into()));
    }
    let dt = times.times()[1] - times.times()[0];
    if dt == 0.0 {
        return Err(Error::InvalidArgument(
            "first two echo times must differ".into(),
        ));
    }
    let nv = dims.n_voxels();
    let mut omega = vec![0.0; nv];
    for &j in mask.indices() {
        let mut z1 = Complex64::new(0.0, 0.0);
        let mut z2 = Complex64::new(0.0, 0.0);
        for c in 0..y.n_coils() {
            let sc = s.at(c, j).conj();
            z1 += sc * y.at(c, 0, j);
            z2 += sc * y.at(c, 1, j);
        }
        omega[j] = (z1.conj() * z2).arg() / dt;
    }
    FieldMap::new(omega, mask)
}

/// Voxelwise sweep initializer for water-fat imaging: evaluates the
/// per-voxel data cost on a symmetric grid and keeps the minimizing
/// grid value. Ties break toward the smallest field magnitude, and
/// zero-signal voxels return zero outright.
pub fn init_sweep(cache: &PairTermCache, cfg: &SweepConfig) -> Result<FieldMap> {
    if cache.basis().mode() != Mode::Waterfat {
        return Err(Error::InvalidArgument(
            "sweep initializer requires a water-fat basis".into(),
        ));
    }
    if cfg.grid_size < 2 {
        return Err(Error::InvalidArgument("sweep grid needs >= 2 points".into()));
    }
    let half_range_hz = match cfg.range_hz {
        Some(r) => r.abs(),
        None => {
            let fat = cache
                .basis()
                .fat_model()
                .expect("water-fat basis carries a fat model");
            (fat.mean_shift_hz() / 2.0).abs()
        }
    };
    if half_range_hz <= 0.0 {
        return Err(Error::InvalidArgument("sweep range must be nonzero".into()));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let g = cfg.grid_size;
    let grid: Vec<f64> = (0..g)
        .map(|i| two_pi * (-half_range_hz + 2.0 * half_range_hz * i as f64 / (g - 1) as f64))
        .collect();

    let nv = cache.n_voxels();
    let pairs = cache.times().pairs();
    let flags = cache.mask().flags();
    let mut omega = vec![0.0f64; nv];
    const BLOCK: usize = 1024;
    omega.par_chunks_mut(BLOCK).enumerate().for_each(|(b, out)| {
        let base = b * BLOCK;
        for (off, oj) in out.iter_mut().enumerate() {
            let j = base + off;
            if !flags[j] {
                continue;
            }
            // Constant-over-grid voxels (no signal) stay at zero.
            let weight: f64 = (0..pairs.len()).map(|p| cache.k0_pair(p)[j]).sum();
            if weight == 0.0 {
                continue;
            }
            let mut best_cost = f64::INFINITY;
            let mut best_w = 0.0f64;
            for &w in &grid {
                let mut cost = 0.0;
                for (p, pair) in pairs.iter().enumerate() {
                    let rot = cache.r_sum_pair(p)[j] * Complex64::from_polar(1.0, w * pair.dt);
                    cost += 2.0 * (cache.k0_pair(p)[j] - rot.re);
                }
                let better = cost < best_cost
                    || (cost == best_cost && w.abs() < best_w.abs());
                if better {
                    best_cost = cost;
                    best_w = w;
                }
            }
            *oj = best_w;
        }
    });
    FieldMap::new(omega, cache.mask())
}

/// PWLS smoothing of the sweep initializer: `cg_iters` conjugate
/// gradient iterations on `(diag(rho) + beta C'C) w = rho .* w0`
/// starting from `w0`, with `rho` the per-voxel sum of pair-term
/// magnitudes.
pub fn init_pwls(
    rough: &FieldMap,
    rho: &[f64],
    reg: &DifferenceOperator,
    beta: f64,
    cg_iters: usize,
) -> Result<FieldMap> {
    let nv = rough.values().len();
    if rho.len() != nv || reg.n_voxels() != nv {
        return Err(Error::ShapeMismatch(
            "weights, regularizer, and field map sizes differ".into(),
        ));
    }
    if beta < 0.0 {
        return Err(Error::InvalidArgument("beta must be >= 0".into()));
    }
    if rho.iter().any(|&r| !r.is_finite() || r < 0.0) {
        return Err(Error::InvalidArgument(
            "PWLS weights must be finite and nonnegative".into(),
        ));
    }
    if beta == 0.0 && rho.iter().all(|&r| r == 0.0) {
        return Err(Error::Singular(
            "PWLS system is all-zero (no weights, no regularizer)".into(),
        ));
    }

    let apply = |x: &[f64]| -> Vec<f64> {
        let mut out = reg.apply_adjoint(&reg.apply(x));
        for (o, (&r, &xj)) in out.iter_mut().zip(rho.iter().zip(x)) {
            *o = beta * *o + r * xj;
        }
        out
    };

    let b: Vec<f64> = rho
        .iter()
        .zip(rough.values())
        .map(|(&r, &w)| r * w)
        .collect();
    let mut x = rough.values().to_vec();
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bj, aj)| bj - aj).collect();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let b_norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    // Stop at roundoff level; iterating past convergence on a
    // singular system lets null-space noise blow up the iterate.
    let stop = 1e-13 * rs.sqrt().max(b_norm);
    for _ in 0..cg_iters {
        if rs.sqrt() <= stop {
            break;
        }
        let ap = apply(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rs / pap;
        for ((xj, rj), (pj, apj)) in x.iter_mut().zip(&mut r).zip(p.iter().zip(&ap)) {
            *xj += alpha * pj;
            *rj -= alpha * apj;
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let mu = rs_new / rs;
        for (pj, rj) in p.iter_mut().zip(&r) {
            *pj = rj + mu * *pj;
        }
        rs = rs_new;
    }
    FieldMap::new(x, rough.mask())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::cost_phi;
    use crate::regularizer::{DiffOrder, ALL_AXES};
    use crate::signal_model::{
        build_gamma, forward_model, precompute_cache, ComponentSource, FatModel,
    };
    use crate::volume::Dims;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rc(rng: &mut StdRng) -> Complex64 {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn two_echo_recovers_unwrapped_truth() {
        let mut rng = StdRng::seed_from_u64(211);
        let dims = Dims::new(3, 2, 1);
        let nv = dims.n_voxels();
        let times = EchoTimes::new(vec![0.0, 0.001, 0.004]).unwrap();
        let basis = build_gamma(Mode::Fieldmap, &times, None).unwrap();
        let s = SensitivityMaps::uniform(dims, 1);
        let m: Vec<Complex64> = (0..nv)
            .map(|_| rc(&mut rng) + Complex64::new(2.0, 0.0))
            .collect();
        // |w * dt| < pi for dt = 1 ms means |f| < 500 Hz.
        let truth: Vec<f64> = (0..nv)
            .map(|_| 2.0 * std::f64::consts::PI * rng.gen_range(-400.0..400.0))
            .collect();
        let y = forward_model(&ComponentSource::Magnetization(&m), &truth, &s, &times, &basis)
            .unwrap();
        let mask = Arc::new(Mask::full(dims));
        let est = init_two_echo(&y, &s, &times, &mask).unwrap();
        for (a, b) in est.values().iter().zip(&truth) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn two_echo_aliases_by_the_sampling_period() {
        let dims = Dims::new(1, 1, 1);
        let times = EchoTimes::new(vec![0.0, 0.001]).unwrap();
        let basis = build_gamma(Mode::Fieldmap, &times, None).unwrap();
        let s = SensitivityMaps::uniform(dims, 1);
        let m = vec![Complex64::new(1.0, 0.0)];
        let two_pi = 2.0 * std::f64::consts::PI;
        let truth = vec![two_pi * 600.0];
        let y = forward_model(&ComponentSource::Magnetization(&m), &truth, &s, &times, &basis)
            .unwrap();
        let mask = Arc::new(Mask::full(dims));
        let est = init_two_echo(&y, &s, &times, &mask).unwrap();
        // 600 Hz wraps to -400 Hz for a 1 ms spacing.
        assert!((est.values()[0] + two_pi * 400.0).abs() < 1e-9 * two_pi * 400.0);
    }

    #[test]
    fn two_echo_matches_scalar_oracle_multicoil() {
        let mut rng = StdRng::seed_from_u64(223);
        let dims = Dims::new(2, 2, 2);
        let nv = dims.n_voxels();
        let nc = 3;
        let times = EchoTimes::new(vec![0.0012, 0.0031]).unwrap();
        let y = MultiEchoImages::new(dims, nc, 2, (0..nc * 2 * nv).map(|_| rc(&mut rng)).collect())
            .unwrap();
        let s = SensitivityMaps::new(
            dims,
            nc,
            (0..nc * nv)
                .map(|_| rc(&mut rng) + Complex64::new(1.2, 0.0))
                .collect(),
        )
        .unwrap();
        let mask = Arc::new(Mask::full(dims));
        let est = init_two_echo(&y, &s, &times, &mask).unwrap();
        for j in 0..nv {
            let mut z1 = Complex64::new(0.0, 0.0);
            let mut z2 = Complex64::new(0.0, 0.0);
            for c in 0..nc {
                z1 += s.at(c, j).conj() * y.at(c, 0, j);
                z2 += s.at(c, j).conj() * y.at(c, 1, j);
            }
            let want = (z1.conj() * z2).arg() / (0.0031 - 0.0012);
            assert!((est.values()[j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        // Global rescaling of the data leaves the estimate unchanged.
        let scaled = y.scaled(Complex64::from_polar(3.0, 0.9));
        let est2 = init_two_echo(&scaled, &s, &times, &mask).unwrap();
        for (a, b) in est.values().iter().zip(est2.values()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    fn waterfat_cache(
        rng: &mut StdRng,
        dims: Dims,
        truth_hz: &[f64],
        water: &[Complex64],
        fat: &[Complex64],
    ) -> PairTermCache {
        let times =
            EchoTimes::new((0..8).map(|i| 1.5e-3 + 2.3e-3 * i as f64).collect()).unwrap();
        let fat_model = FatModel::single_peak(-220.0);
        let basis = build_gamma(Mode::Waterfat, &times, Some(&fat_model)).unwrap();
        let s = SensitivityMaps::uniform(dims, 1);
        let two_pi = 2.0 * std::f64::consts::PI;
        let omega: Vec<f64> = truth_hz.iter().map(|f| two_pi * f).collect();
        let y = forward_model(
            &ComponentSource::WaterFat { water, fat },
            &omega,
            &s,
            &times,
            &basis,
        )
        .unwrap();
        let _ = rng;
        let mask = Arc::new(Mask::full(dims));
        precompute_cache(&y, &s, &basis, &times, &mask).unwrap()
    }

    #[test]
    fn sweep_finds_on_grid_truth_for_water_voxel() {
        let mut rng = StdRng::seed_from_u64(227);
        let dims = Dims::new(2, 1, 1);
        let cfg = SweepConfig::default();
        // Pick a value that lies exactly on the default grid:
        // half-range 110 Hz, 100 points -> spacing 220/99.
        let spacing = 220.0 / 99.0;
        let on_grid = -110.0 + 30.0 * spacing;
        let truth_hz = vec![on_grid, 0.0];
        let water = vec![Complex64::new(1.0, 0.3), Complex64::new(0.0, 0.0)];
        let fat = vec![Complex64::new(0.0, 0.0); 2];
        let cache = waterfat_cache(&mut rng, dims, &truth_hz, &water, &fat);
        let est = init_sweep(&cache, &cfg).unwrap();
        let got_hz = est.values()[0] / (2.0 * std::f64::consts::PI);
        assert!(
            (got_hz - on_grid).abs() <= 1e-9 * on_grid.abs(),
            "sweep {got_hz} vs {on_grid}"
        );
        // Zero-signal voxel returns zero by the tie-break.
        assert_eq!(est.values()[1], 0.0);
    }

    #[test]
    fn sweep_lands_within_one_spacing_of_off_grid_truth() {
        let mut rng = StdRng::seed_from_u64(229);
        let dims = Dims::new(1, 1, 1);
        let cfg = SweepConfig::default();
        let truth_hz = vec![47.31];
        let water = vec![Complex64::new(0.9, -0.2)];
        let fat = vec![Complex64::new(0.45, 0.31)];
        let cache = waterfat_cache(&mut rng, dims, &truth_hz, &water, &fat);
        let est = init_sweep(&cache, &cfg).unwrap();
        let got_hz = est.values()[0] / (2.0 * std::f64::consts::PI);
        let spacing = 220.0 / 99.0;
        assert!(
            (got_hz - truth_hz[0]).abs() <= spacing,
            "sweep {got_hz} vs {}",
            truth_hz[0]
        );
    }

    #[test]
    fn sweep_argmin_matches_bruteforce_cost_scan() {
        let mut rng = StdRng::seed_from_u64(233);
        let dims = Dims::new(3, 2, 1);
        let nv = dims.n_voxels();
        let truth_hz: Vec<f64> = (0..nv).map(|_| rng.gen_range(-80.0..80.0)).collect();
        let water: Vec<Complex64> = (0..nv).map(|_| rc(&mut rng)).collect();
        let fat: Vec<Complex64> = (0..nv).map(|_| rc(&mut rng)).collect();
        let cache = waterfat_cache(&mut rng, dims, &truth_hz, &water, &fat);
        let cfg = SweepConfig::default();
        let est = init_sweep(&cache, &cfg).unwrap();

        // Independent scan: evaluate the full-volume cost with one
        // voxel varied at a time.
        let half = 110.0;
        let two_pi = 2.0 * std::f64::consts::PI;
        for j in 0..nv {
            let mut best = (f64::INFINITY, 0.0f64);
            for i in 0..cfg.grid_size {
                let w =
                    two_pi * (-half + 2.0 * half * i as f64 / (cfg.grid_size - 1) as f64);
                let mut omega = vec![0.0; nv];
                omega[j] = w;
                // Other voxels contribute constants; compare sums.
                let c = cost_phi(&cache, &omega);
                if c < best.0 - 1e-12 || (c < best.0 + 1e-12 && w.abs() < best.1.abs()) {
                    best = (c, w);
                }
            }
            assert!(
                (est.values()[j] - best.1).abs() <= 1e-9 * (1.0 + best.1.abs()),
                "voxel {j}: sweep {} vs oracle {}",
                est.values()[j],
                best.1
            );
        }
    }

    #[test]
    fn pwls_with_zero_beta_returns_input() {
        let dims = Dims::new(3, 2, 1);
        let nv = dims.n_voxels();
        let mask = Arc::new(Mask::full(dims));
        let mut rng = StdRng::seed_from_u64(239);
        let rough = FieldMap::new(
            (0..nv).map(|_| rng.gen_range(-50.0..50.0)).collect(),
            &mask,
        )
        .unwrap();
        let rho: Vec<f64> = (0..nv).map(|_| rng.gen_range(0.5..2.0)).collect();
        let reg = DifferenceOperator::new(&mask, DiffOrder::First, &ALL_AXES);
        let out = init_pwls(&rough, &rho, &reg, 0.0, 10).unwrap();
        for (a, b) in out.values().iter().zip(rough.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pwls_pure_smoothing_flattens_the_map() {
        let dims = Dims::new(4, 4, 1);
        let nv = dims.n_voxels();
        let mask = Arc::new(Mask::full(dims));
        let mut rng = StdRng::seed_from_u64(241);
        let rough = FieldMap::new(
            (0..nv).map(|_| rng.gen_range(-50.0..50.0)).collect(),
            &mask,
        )
        .unwrap();
        let reg = DifferenceOperator::new(&mask, DiffOrder::First, &ALL_AXES);
        let mut last = f64::INFINITY;
        for iters in [1, 3, 6, 12, 24] {
            let out = init_pwls(&rough, &vec![0.0; nv], &reg, 1.0, iters).unwrap();
            let roughness = reg.penalty_norm_sq(out.values());
            assert!(
                roughness <= last * (1.0 + 1e-9) + 1e-9,
                "smoothing not monotone: {roughness} after {last}"
            );
            last = roughness;
        }
        // Long CG run drives the roughness to zero.
        let out = init_pwls(&rough, &vec![0.0; nv], &reg, 1.0, 200).unwrap();
        assert!(reg.penalty_norm_sq(out.values()) < 1e-10);
    }

    #[test]
    fn pwls_matches_dense_solver_oracle() {
        let mut rng = StdRng::seed_from_u64(251);
        let dims = Dims::new(4, 3, 2);
        let nv = dims.n_voxels();
        let mask = Arc::new(Mask::full(dims));
        let rough = FieldMap::new(
            (0..nv).map(|_| rng.gen_range(-30.0..30.0)).collect(),
            &mask,
        )
        .unwrap();
        let rho: Vec<f64> = (0..nv).map(|_| rng.gen_range(0.1..1.0)).collect();
        let reg = DifferenceOperator::new(&mask, DiffOrder::First, &ALL_AXES);
        let beta = 0.4;
        let out = init_pwls(&rough, &rho, &reg, beta, 200).unwrap();

        let reg_m = reg.assemble_normal_matrix(beta).unwrap();
        let a = nalgebra::DMatrix::from_fn(nv, nv, |i, j| {
            reg_m.get(i, j) + if i == j { rho[i] } else { 0.0 }
        });
        let b = nalgebra::DVector::from_fn(nv, |i, _| rho[i] * rough.values()[i]);
        let oracle = a.lu().solve(&b).unwrap();
        for (got, want) in out.values().iter().zip(oracle.iter()) {
            assert!(
                (got - want).abs() <= 1e-6 * (1.0 + want.abs()),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn pwls_rejects_all_zero_system() {
        let dims = Dims::new(2, 1, 1);
        let mask = Arc::new(Mask::full(dims));
        let rough = FieldMap::zeros(&mask);
        let reg = DifferenceOperator::new(&mask, DiffOrder::First, &ALL_AXES);
        assert!(init_pwls(&rough, &[0.0, 0.0], &reg, 0.0, 5).is_err());
    }

    #[test]
    fn sweep_requires_waterfat_basis() {
        let mut rng = StdRng::seed_from_u64(257);
        let dims = Dims::new(2, 1, 1);
        let nv = dims.n_voxels();
        let times = EchoTimes::new(vec![0.0, 0.002]).unwrap();
        let basis = build_gamma(Mode::Fieldmap, &times, None).unwrap();
        let s = SensitivityMaps::uniform(dims, 1);
        let y = MultiEchoImages::new(dims, 1, 2, (0..2 * nv).map(|_| rc(&mut rng)).collect())
            .unwrap();
        let mask = Arc::new(Mask::full(dims));
        let cache = precompute_cache(&y, &s, &basis, &times, &mask).unwrap();
        assert!(init_sweep(&cache, &SweepConfig::default()).is_err());
    }
}
