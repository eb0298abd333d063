//! Regularized B0 field map estimation and water-fat separation for
//! multi-echo, multi-coil MRI.
//!
//! The library estimates a smooth per-voxel off-resonance map (rad/s,
//! reported in Hz) from complex multi-echo images by minimizing a
//! penalized likelihood whose image variable has been eliminated in
//! closed form. The minimizer is found with a preconditioned nonlinear
//! conjugate gradient method: the preconditioner is an incomplete
//! Cholesky factorization of the sparse Hessian approximation
//! `D + beta * C'C`, and the step size comes from a monotone line
//! search built on a quadratic majorizer with optimal curvatures.
//!
//! Modules roughly follow the data flow:
//!
//! * [`volume`] — grid dimensions, voxel linearization, masks.
//! * [`signal_model`] — acquisition model, signal basis / projector,
//!   and the pair-term cache that makes cost evaluations cheap.
//! * [`likelihood`] — eliminated-image cost, gradient, optimal
//!   curvatures, and the closed-form image given the field map.
//! * [`regularizer`] — masked finite-difference operator `C`.
//! * [`sparse`] — sparse SPD storage, incomplete Cholesky factors,
//!   triangular solves.
//! * [`optimizer`] — NCG with monotone line search, plus the
//!   quadratic-majorizer and diagonally preconditioned baselines.
//! * [`init`] — two-echo and grid-sweep/PWLS initializers.
//! * [`waterfat`] — closed-form water/fat recovery.
//! * [`sim`] — phantoms, synthetic coils, noise, masks, metrics.
//! * [`io`] — portable volume containers, run configs, CSV logs.

pub mod error;
pub mod init;
pub mod io;
pub mod likelihood;
pub mod optimizer;
pub mod regularizer;
pub mod signal_model;
pub mod sim;
pub mod sparse;
pub mod volume;
pub mod waterfat;

pub use error::{Error, Result};
pub use likelihood::{CostReport, FieldMap};
pub use regularizer::{DiffOrder, DifferenceOperator};
pub use signal_model::{
    EchoTimes, FatModel, Mode, MultiEchoImages, PairTermCache, SensitivityMaps, SignalBasis,
};
pub use sparse::{SparseSpd, TriangularFactor};
pub use volume::{Dims, Mask};

/// Deterministic parallel sum: fixed-size blocks are reduced in
/// parallel and the per-block results are combined in index order, so
/// the result does not depend on thread count or scheduling.
pub(crate) fn par_block_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Sync,
{
    use rayon::prelude::*;
    const BLOCK: usize = 4096;
    if n == 0 {
        return 0.0;
    }
    let n_blocks = n.div_ceil(BLOCK);
    let partials: Vec<f64> = (0..n_blocks)
        .into_par_iter()
        .map(|b| f(b * BLOCK..((b + 1) * BLOCK).min(n)))
        .collect();
    partials.iter().sum()
}
