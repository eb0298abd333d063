//! Synthetic phantoms, coil maps, noise injection, signal masks, and
//! error metrics for the simulation experiments.

use crate::error::{Error, Result};
use crate::signal_model::{MultiEchoImages, SensitivityMaps};
use crate::volume::{Dims, Mask};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Synthetic object: magnitude, true field (Hz), and optional true
/// water/fat components.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub dims: Dims,
    pub magnitude: Vec<f64>,
    pub field_hz: Vec<f64>,
    pub water: Option<Vec<Complex64>>,
    pub fat: Option<Vec<Complex64>>,
}

fn normalized_coords(dims: Dims, j: usize) -> (f64, f64, f64) {
    let (x, y, z) = dims.coords(j);
    let scale = |i: usize, n: usize| -> f64 {
        if n <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    (scale(x, dims.nx), scale(y, dims.ny), scale(z, dims.nz))
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Brain-like 3D phantom: soft-edged ellipsoid with a bright shell
/// and interior texture over a faint background, with a smooth
/// polynomial-plus-Gaussian field map spanning roughly +-150 Hz.
///
/// The background floor keeps some signal in every voxel a dilated
/// signal mask can reach, so noiseless data determine the field
/// everywhere inside the mask.
pub fn brain_phantom(dims: Dims) -> Phantom {
    const SCALE: f64 = 40.0;
    const FLOOR: f64 = 0.12;
    const RIPPLE_HZ: f64 = 12.0;
    let nv = dims.n_voxels();
    let mut magnitude = vec![0.0; nv];
    let mut field_hz = vec![0.0; nv];
    for j in 0..nv {
        let (u, v, w) = normalized_coords(dims, j);
        let rho = ((u / 0.88).powi(2) + (v / 0.92).powi(2) + (w / 0.85).powi(2)).sqrt();
        let edge = smoothstep((1.0 - rho) / 0.10);
        let interior =
            0.72 + 0.28 * (-((u + 0.10).powi(2) + (v - 0.15).powi(2) + w * w) / 0.35).exp();
        let shell = 0.30 * (-((rho - 0.88) / 0.07).powi(2)).exp();
        magnitude[j] = SCALE * (edge * (interior + shell) + FLOOR);

        // Smooth trends plus a band-limited ripple that regularized
        // estimates partially smooth away.
        field_hz[j] = 18.0 + 32.0 * u - 26.0 * v + 15.0 * w + 38.0 * (u * u - 0.3)
            + 85.0 * (-((u - 0.25).powi(2) + (v - 0.20).powi(2) + (w + 0.20).powi(2)) / 0.18).exp()
            - 95.0 * (-((u + 0.45).powi(2) + (v + 0.30).powi(2) + (w - 0.30).powi(2)) / 0.12).exp()
            + RIPPLE_HZ
                * (9.0 * std::f64::consts::PI * u).sin()
                * (7.0 * std::f64::consts::PI * v).sin()
                * (5.0 * std::f64::consts::PI * w).sin();
    }
    Phantom {
        dims,
        magnitude,
        field_hz,
        water: None,
        fat: None,
    }
}

/// 2D water-fat phantom: watery interior, fatty rim, smooth field map
/// within the sweep ambiguity range.
pub fn waterfat_phantom(dims: Dims) -> Phantom {
    let nv = dims.n_voxels();
    let mut magnitude = vec![0.0; nv];
    let mut field_hz = vec![0.0; nv];
    let mut water = vec![Complex64::new(0.0, 0.0); nv];
    let mut fat = vec![Complex64::new(0.0, 0.0); nv];
    for j in 0..nv {
        let (u, v, _) = normalized_coords(dims, j);
        let rho = ((u / 0.90).powi(2) + (v / 0.84).powi(2)).sqrt();
        let edge = smoothstep((1.0 - rho) / 0.08);
        let w_mag = edge * 0.95 * (-rho * rho / 0.55).exp();
        let rim = (-((rho - 0.80) / 0.09).powi(2)).exp();
        let blob = 0.55 * (-((u - 0.30).powi(2) + (v + 0.05).powi(2)) / 0.04).exp();
        let f_mag = edge * (0.85 * rim + blob);
        let wphase = 0.4 * u - 0.3 * v;
        let fphase = wphase + 0.2;
        water[j] = Complex64::from_polar(w_mag, wphase);
        fat[j] = Complex64::from_polar(f_mag, fphase);
        magnitude[j] = (water[j] + fat[j]).norm();
        field_hz[j] = 8.0 + 20.0 * u - 14.0 * v + 28.0 * (u * u - 0.4 * v * v)
            + 22.0 * (-((u - 0.20).powi(2) + (v - 0.25).powi(2)) / 0.15).exp();
    }
    Phantom {
        dims,
        magnitude,
        field_hz,
        water: Some(water),
        fat: Some(fat),
    }
}

/// Smooth synthetic coil maps: per-coil Gaussian magnitude lobes
/// centered around the lateral boundary with gentle linear phase.
/// One coil returns the all-ones maps.
pub fn sim_coil_maps(dims: Dims, n_coils: usize) -> SensitivityMaps {
    if n_coils == 1 {
        return SensitivityMaps::uniform(dims, 1);
    }
    let nv = dims.n_voxels();
    let mut data = vec![Complex64::new(0.0, 0.0); n_coils * nv];
    for c in 0..n_coils {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64;
        let cu = 1.15 * theta.cos();
        let cv = 1.15 * theta.sin();
        let (p_u, p_v, p_w) = (
            0.45 + 0.11 * c as f64,
            -0.30 + 0.07 * c as f64,
            0.20 - 0.05 * c as f64,
        );
        let out = &mut data[c * nv..(c + 1) * nv];
        for (j, o) in out.iter_mut().enumerate() {
            let (u, v, w) = normalized_coords(dims, j);
            let d2 = (u - cu).powi(2) + (v - cv).powi(2) + w * w;
            let mag = (-d2 / 1.6).exp();
            let phase = p_u * u + p_v * v + p_w * w + 0.5 * c as f64;
            *o = Complex64::from_polar(mag, phase);
        }
    }
    SensitivityMaps::new(dims, n_coils, data).expect("synthetic maps are well formed")
}

/// Adds zero-mean white complex Gaussian noise scaled so the
/// volume-wide energy ratio `10 log10(||y||^2 / E||noise||^2)` equals
/// `snr_db`. Infinite SNR returns the input unchanged. Each (coil,
/// echo) plane draws from its own counter-based stream of the seeded
/// generator, so results are independent of threading and plane
/// order.
pub fn add_noise_snr(y: &MultiEchoImages, snr_db: f64, seed: u64) -> MultiEchoImages {
    if snr_db.is_infinite() {
        return y.clone();
    }
    let nv = y.dims().n_voxels();
    let n_samples = (y.n_coils() * y.n_echoes() * nv) as f64;
    let sigma_sq = y.energy() / (n_samples * 10f64.powf(snr_db / 10.0));
    let comp_sigma = (sigma_sq / 2.0).sqrt();
    let mut data = y.data().to_vec();
    for c in 0..y.n_coils() {
        for l in 0..y.n_echoes() {
            let plane = c * y.n_echoes() + l;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(plane as u64 + 1);
            let out = &mut data[plane * nv..(plane + 1) * nv];
            for o in out.iter_mut() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *o += Complex64::new(comp_sigma * re, comp_sigma * im);
            }
        }
    }
    MultiEchoImages::new(y.dims(), y.n_coils(), y.n_echoes(), data)
        .expect("noise preserves shape and finiteness")
}

/// Coil-combined first-echo magnitude `|sum_c conj(s_c) y_c1|`.
pub fn combined_first_echo_magnitude(y: &MultiEchoImages, s: &SensitivityMaps) -> Vec<f64> {
    let nv = y.dims().n_voxels();
    let mut mag = vec![0.0; nv];
    for (j, m) in mag.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for c in 0..y.n_coils() {
            acc += s.at(c, j).conj() * y.at(c, 0, j);
        }
        *m = acc.norm();
    }
    mag
}

/// Voxels whose coil-combined first-echo magnitude reaches the
/// threshold fraction of the maximum (the pre-hull survivor set).
pub fn signal_threshold_flags(
    y: &MultiEchoImages,
    s: &SensitivityMaps,
    threshold_frac: f64,
) -> Vec<bool> {
    let mag = combined_first_echo_magnitude(y, s);
    let peak = mag.iter().fold(0.0f64, |m, &v| m.max(v));
    let thr = threshold_frac * peak;
    mag.iter().map(|&v| v >= thr).collect()
}

#[inline]
fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone-chain convex hull (counterclockwise, no collinear
/// duplicates). Degenerate inputs return the point or segment ends.
fn convex_hull(points: &mut Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    points.sort_unstable();
    points.dedup();
    let n = points.len();
    if n <= 2 {
        return points.clone();
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * n);
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in points.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn on_segment(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> bool {
    cross(a, b, p) == 0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

fn point_in_hull(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => on_segment(hull[0], hull[1], p),
        _ => (0..hull.len()).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            cross(a, b, p) >= 0
        }),
    }
}

/// Signal mask: threshold the coil-combined first-echo magnitude at
/// `threshold_frac` of its maximum, fill the per-slice 2D convex hull
/// of the surviving voxels, then dilate along the axes by `dilation`
/// voxels. Voxels with zero coil sensitivity are excluded.
pub fn make_mask(
    y: &MultiEchoImages,
    s: &SensitivityMaps,
    threshold_frac: f64,
    dilation: usize,
) -> Result<Mask> {
    let dims = y.dims();
    if s.dims() != dims || s.n_coils() != y.n_coils() {
        return Err(Error::ShapeMismatch(
            "images and sensitivities must agree".into(),
        ));
    }
    let surv = signal_threshold_flags(y, s, threshold_frac);
    if !surv.iter().any(|&v| v) {
        return Err(Error::InvalidMask(
            "no voxels survive the magnitude threshold".into(),
        ));
    }
    let mut flags = vec![false; dims.n_voxels()];
    for z in 0..dims.nz {
        let mut pts: Vec<(i64, i64)> = Vec::new();
        for yy in 0..dims.ny {
            for xx in 0..dims.nx {
                if surv[dims.index(xx, yy, z)] {
                    pts.push((xx as i64, yy as i64));
                }
            }
        }
        if pts.is_empty() {
            continue;
        }
        let hull = convex_hull(&mut pts);
        for yy in 0..dims.ny {
            for xx in 0..dims.nx {
                if point_in_hull(&hull, (xx as i64, yy as i64)) {
                    flags[dims.index(xx, yy, z)] = true;
                }
            }
        }
    }
    let hulled = Mask::from_flags(dims, flags)?.dilate_axes(dilation);
    let flags: Vec<bool> = hulled
        .flags()
        .iter()
        .enumerate()
        .map(|(j, &f)| f && s.ssq()[j] > 0.0)
        .collect();
    let mask = Mask::from_flags(dims, flags)?;
    if mask.is_empty() {
        return Err(Error::InvalidMask("mask is empty".into()));
    }
    Ok(mask)
}

/// Root-mean-square difference over masked voxels, reported in Hz
/// (inputs in rad/s).
pub fn rms_diff_hz(a_rad: &[f64], b_rad: &[f64], mask: &Mask) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut acc = 0.0;
    for &j in mask.indices() {
        let d = (a_rad[j] - b_rad[j]) / two_pi;
        acc += d * d;
    }
    (acc / mask.count() as f64).sqrt()
}

/// Normalized RMSE `||est - truth|| / ||truth||` over masked voxels.
pub fn nrmse_complex(est: &[Complex64], truth: &[Complex64], mask: &Mask) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &j in mask.indices() {
        num += (est[j] - truth[j]).norm_sqr();
        den += truth[j].norm_sqr();
    }
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizer::{DiffOrder, DifferenceOperator, ALL_AXES};
    use crate::signal_model::{build_gamma, forward_model, ComponentSource, EchoTimes, Mode};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn uniform_images(dims: Dims, value: Complex64) -> MultiEchoImages {
        MultiEchoImages::new(dims, 1, 2, vec![value; 2 * dims.n_voxels()]).unwrap()
    }

    #[test]
    fn uniform_volume_masks_everything() {
        let dims = Dims::new(5, 4, 3);
        let y = uniform_images(dims, Complex64::new(1.0, 0.2));
        let s = SensitivityMaps::uniform(dims, 1);
        let mask = make_mask(&y, &s, 0.1, 2).unwrap();
        assert_eq!(mask.count(), dims.n_voxels());
    }

    #[test]
    fn single_bright_voxel_masks_a_dilated_cross() {
        let dims = Dims::new(9, 9, 9);
        let nv = dims.n_voxels();
        let mut data = vec![Complex64::new(0.0, 0.0); 2 * nv];
        let j = dims.index(4, 4, 4);
        data[j] = Complex64::new(1.0, 0.0);
        data[nv + j] = Complex64::new(1.0, 0.0);
        let y = MultiEchoImages::new(dims, 1, 2, data).unwrap();
        let s = SensitivityMaps::uniform(dims, 1);
        let mask = make_mask(&y, &s, 0.1, 2).unwrap();
        assert_eq!(mask.count(), 13);
        assert!(mask.contains(dims.index(6, 4, 4)));
        assert!(mask.contains(dims.index(4, 4, 2)));
        assert!(!mask.contains(dims.index(5, 5, 4)));
    }

    /// Brute-force hull membership: a point is inside iff it lies in
    /// some triangle (or on some segment) of survivor points.
    fn oracle_in_hull(pts: &[(i64, i64)], p: (i64, i64)) -> bool {
        if pts.contains(&p) {
            return true;
        }
        for (ai, &a) in pts.iter().enumerate() {
            for &b in &pts[ai..] {
                if on_segment(a, b, p) {
                    return true;
                }
            }
        }
        for (ai, &a) in pts.iter().enumerate() {
            for (bi, &b) in pts.iter().enumerate().skip(ai) {
                for &c in &pts[bi..] {
                    let d1 = cross(a, b, p);
                    let d2 = cross(b, c, p);
                    let d3 = cross(c, a, p);
                    let area = cross(a, b, c);
                    if area == 0 {
                        continue;
                    }
                    let (d1, d2, d3) = if area > 0 { (d1, d2, d3) } else { (-d1, -d2, -d3) };
                    if d1 >= 0 && d2 >= 0 && d3 >= 0 {
                        return true;
                    }
                }
            }
        }
        false
    }

    #[test]
    fn l_shaped_region_hull_fills_concavity_per_oracle() {
        let dims = Dims::new(16, 16, 1);
        let nv = dims.n_voxels();
        let mut data = vec![Complex64::new(0.0, 0.0); 2 * nv];
        let mut pts = Vec::new();
        for x in 2..14 {
            for y in 2..5 {
                pts.push((x as i64, y as i64));
            }
        }
        for x in 2..5 {
            for y in 5..14 {
                pts.push((x as i64, y as i64));
            }
        }
        for &(x, y) in &pts {
            let j = dims.index(x as usize, y as usize, 0);
            data[j] = Complex64::new(1.0, 0.0);
            data[nv + j] = Complex64::new(1.0, 0.0);
        }
        let y = MultiEchoImages::new(dims, 1, 2, data).unwrap();
        let s = SensitivityMaps::uniform(dims, 1);
        let mask = make_mask(&y, &s, 0.1, 0).unwrap();
        for yy in 0..16 {
            for xx in 0..16 {
                let want = oracle_in_hull(&pts, (xx as i64, yy as i64));
                assert_eq!(
                    mask.contains(dims.index(xx, yy, 0)),
                    want,
                    "hull mismatch at ({xx}, {yy})"
                );
            }
        }
        // The concavity corner is filled by the hull.
        assert!(mask.contains(dims.index(8, 8, 0)));
    }

    #[test]
    fn threshold_masks_nest_and_dilation_grows() {
        let mut rng = StdRng::seed_from_u64(401);
        let dims = Dims::new(8, 8, 4);
        let nv = dims.n_voxels();
        let data: Vec<Complex64> = (0..2 * nv)
            .map(|_| Complex64::new(rng.gen_range(0.0..1.0), rng.gen_range(-0.2..0.2)))
            .collect();
        let y = MultiEchoImages::new(dims, 1, 2, data).unwrap();
        let s = SensitivityMaps::uniform(dims, 1);
        let loose = signal_threshold_flags(&y, &s, 0.1);
        let tight = signal_threshold_flags(&y, &s, 0.4);
        for j in 0..nv {
            assert!(!tight[j] || loose[j], "threshold masks do not nest");
        }
        let m1 = make_mask(&y, &s, 0.4, 1).unwrap();
        let m2 = make_mask(&y, &s, 0.4, 2).unwrap();
        for j in 0..nv {
            assert!(!m1.contains(j) || m2.contains(j), "dilation shrank the mask");
        }
    }

    #[test]
    fn infinite_snr_is_identity_and_seeds_are_reproducible() {
        let dims = Dims::new(8, 8, 6);
        let phantom = brain_phantom(dims);
        let times = EchoTimes::new(vec![0.0, 0.002, 0.01]).unwrap();
        let basis = build_gamma(Mode::Fieldmap, &times, None).unwrap();
        let s = sim_coil_maps(dims, 4);
        let m: Vec<Complex64> = phantom
            .magnitude
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        let omega: Vec<f64> = phantom
            .field_hz
            .iter()
            .map(|f| 2.0 * std::f64::consts::PI * f)
            .collect();
        let y = forward_model(&ComponentSource::Magnetization(&m), &omega, &s, &times, &basis)
            .unwrap();
        let clean = add_noise_snr(&y, f64::INFINITY, 7);
        assert_eq!(clean.data(), y.data());
        let a = add_noise_snr(&y, 20.0, 7);
        let b = add_noise_snr(&y, 20.0, 7);
        assert_eq!(a.data(), b.data());
        let c = add_noise_snr(&y, 20.0, 8);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn empirical_snr_matches_target() {
        let dims = Dims::new(24, 24, 8);
        let nv = dims.n_voxels();
        let y = MultiEchoImages::new(dims, 2, 3, vec![Complex64::new(0.8, -0.4); 2 * 3 * nv])
            .unwrap();
        let noisy = add_noise_snr(&y, 20.0, 3);
        let noise_energy: f64 = noisy
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let snr = 10.0 * (y.energy() / noise_energy).log10();
        assert!((snr - 20.0).abs() < 0.5, "empirical snr {snr}");
    }

    #[test]
    fn noise_is_unbiased_over_many_seeds() {
        let dims = Dims::new(2, 1, 1);
        let y = uniform_images(dims, Complex64::new(0.7, 0.1));
        let n_draws = 1000;
        let mut mean = vec![Complex64::new(0.0, 0.0); y.data().len()];
        let n_samples = y.data().len() as f64;
        let sigma = (y.energy() / (n_samples * 10f64.powf(1.4))).sqrt();
        for seed in 0..n_draws {
            let noisy = add_noise_snr(&y, 14.0, seed);
            for (m, (a, b)) in mean.iter_mut().zip(noisy.data().iter().zip(y.data())) {
                *m += a - b;
            }
        }
        let tol = 3.0 * sigma / (n_draws as f64).sqrt();
        for m in &mean {
            assert!((m / n_draws as f64).norm() < tol);
        }
    }

    #[test]
    fn one_coil_maps_are_uniform_and_many_coils_cover_volume() {
        let dims = Dims::new(12, 12, 6);
        let one = sim_coil_maps(dims, 1);
        assert!(one
            .data()
            .iter()
            .all(|v| (v - Complex64::new(1.0, 0.0)).norm() == 0.0));
        let maps = sim_coil_maps(dims, 4);
        for &v in maps.ssq() {
            assert!(v > 0.0);
        }
    }

    #[test]
    fn coil_maps_are_smooth_under_first_differences() {
        let dims = Dims::new(16, 16, 12);
        let maps = sim_coil_maps(dims, 4);
        let mask = Arc::new(Mask::full(dims));
        let op = DifferenceOperator::new(&mask, DiffOrder::First, &ALL_AXES);
        for c in 0..4 {
            let coil = maps.coil(c);
            let re: Vec<f64> = coil.iter().map(|v| v.re).collect();
            let im: Vec<f64> = coil.iter().map(|v| v.im).collect();
            let num = (op.penalty_norm_sq(&re) + op.penalty_norm_sq(&im)).sqrt();
            let den = coil.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let ratio = num / den;
            assert!(ratio < 0.4, "coil {c} roughness {ratio}");
        }
    }

    #[test]
    fn metrics_reduce_to_hand_values() {
        let dims = Dims::new(4, 1, 1);
        let mask = Mask::from_flags(dims, vec![true, true, true, false]).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let a = vec![two_pi * 10.0, two_pi * 20.0, two_pi * 30.0, 0.0];
        assert_eq!(rms_diff_hz(&a, &a, &mask), 0.0);
        // Constant 5 Hz offset over the mask.
        let b: Vec<f64> = a.iter().map(|v| v + two_pi * 5.0).collect();
        assert!((rms_diff_hz(&a, &b, &mask) - 5.0).abs() < 1e-12);

        let mut rng = StdRng::seed_from_u64(53);
        let est: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let truth: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let oracle = {
            let mut acc = 0.0;
            for j in 0..3 {
                let d = (est[j] - truth[j]) / two_pi;
                acc += d * d;
            }
            (acc / 3.0).sqrt()
        };
        assert!((rms_diff_hz(&est, &truth, &mask) - oracle).abs() < 1e-14);
    }

    #[test]
    fn nrmse_measures_relative_error() {
        let dims = Dims::new(2, 1, 1);
        let mask = Mask::full(dims);
        let truth = vec![Complex64::new(3.0, 0.0), Complex64::new(0.0, 4.0)];
        let est = vec![Complex64::new(3.0, 0.0), Complex64::new(0.0, 4.0)];
        assert_eq!(nrmse_complex(&est, &truth, &mask), 0.0);
        let off = vec![Complex64::new(3.0, 0.5), Complex64::new(0.0, 4.0)];
        assert!((nrmse_complex(&off, &truth, &mask) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn phantom_fields_span_expected_range() {
        let p = brain_phantom(Dims::new(32, 32, 16));
        let max = p.field_hz.iter().fold(f64::MIN, |m, &v| m.max(v));
        let min = p.field_hz.iter().fold(f64::MAX, |m, &v| m.min(v));
        assert!(max > 80.0 && max < 250.0, "max field {max}");
        assert!(min < -30.0 && min > -250.0, "min field {min}");
        assert!(p.magnitude.iter().all(|&v| v >= 0.0));

        let wf = waterfat_phantom(Dims::new(48, 48, 1));
        let wmax = wf.field_hz.iter().fold(f64::MIN, |m, &v| m.max(v));
        assert!(wmax.abs() < 110.0, "water-fat field range {wmax}");
        assert!(wf.water.is_some() && wf.fat.is_some());
    }
}
