//! Closed-form water/fat component recovery given the field map.
//!
//! Per voxel this solves the tall least-squares system that stacks
//! every coil and echo against the two-column signal basis rotated by
//! the field phase. The solve goes through the 2x2 normal equations,
//! which is exact for a full-rank basis; voxels whose system is rank
//! deficient (zero sensitivity, no data) come back as zeros with a
//! flag.

use crate::error::{Error, Result};
use crate::likelihood::{solve_voxel_components, FieldMap, MlImages};
use crate::signal_model::{EchoTimes, Mode, MultiEchoImages, SensitivityMaps, SignalBasis};
use num_complex::Complex64;

/// Water and fat component images with ill-posed-voxel flags.
#[derive(Debug, Clone)]
pub struct ComponentImages {
    pub water: Vec<Complex64>,
    pub fat: Vec<Complex64>,
    /// Masked voxels where the per-voxel system was rank deficient.
    pub flagged: Vec<bool>,
}

impl ComponentImages {
    pub fn from_ml_images(est: &MlImages) -> Result<Self> {
        if est.n_components() != 2 {
            return Err(Error::InvalidArgument(
                "component images require a two-column basis".into(),
            ));
        }
        Ok(ComponentImages {
            water: est.component(0).to_vec(),
            fat: est.component(1).to_vec(),
            flagged: est.flagged.clone(),
        })
    }
}

/// Recovers water and fat images from the data and an estimated field
/// map. Voxels outside the field map's mask stay zero.
pub fn separate(
    y: &MultiEchoImages,
    s: &SensitivityMaps,
    basis: &SignalBasis,
    times: &EchoTimes,
    omega: &FieldMap,
) -> Result<ComponentImages> {
    if basis.mode() != Mode::Waterfat {
        return Err(Error::InvalidArgument(
            "separation requires a water-fat basis".into(),
        ));
    }
    let dims = y.dims();
    let nv = dims.n_voxels();
    if s.dims() != dims || omega.mask().dims() != dims {
        return Err(Error::ShapeMismatch(
            "images, sensitivities, and field map must share dimensions".into(),
        ));
    }
    if s.n_coils() != y.n_coils() || basis.n_echoes() != y.n_echoes() || times.len() != y.n_echoes()
    {
        return Err(Error::ShapeMismatch(
            "coil or echo counts are inconsistent".into(),
        ));
    }

    let l = y.n_echoes();
    let zero = Complex64::new(0.0, 0.0);
    let mut water = vec![zero; nv];
    let mut fat = vec![zero; nv];
    let mut flagged = vec![false; nv];
    let mut zbuf = vec![zero; l];
    let mask = omega.mask();
    for &j in mask.indices() {
        for (li, zb) in zbuf.iter_mut().enumerate() {
            let mut acc = zero;
            for c in 0..y.n_coils() {
                acc += s.at(c, j).conj() * y.at(c, li, j);
            }
            *zb = acc;
        }
        let (q, flag) =
            solve_voxel_components(basis, times.times(), &zbuf, s.ssq()[j], omega.values()[j]);
        water[j] = q[0];
        fat[j] = q[1];
        flagged[j] = flag;
    }
    Ok(ComponentImages {
        water,
        fat,
        flagged,
    })
}
