//! Grid dimensions, voxel linearization, and boolean masks.
//!
//! Voxels are linearized x-fastest: `j = x + nx*(y + ny*z)`. Every
//! array in the crate and every file format uses this ordering.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Volume dimensions `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index of voxel `(x, y, z)`, x-fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, j: usize) -> (usize, usize, usize) {
        let x = j % self.nx;
        let y = (j / self.nx) % self.ny;
        let z = j / (self.nx * self.ny);
        (x, y, z)
    }
}

/// Boolean voxel mask over a volume.
///
/// The list of masked linear indices is cached at construction; most
/// per-voxel loops iterate over it rather than scanning the full grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: Dims,
    flags: Vec<bool>,
    indices: Vec<usize>,
}

impl Mask {
    pub fn from_flags(dims: Dims, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != dims.n_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} flags for {} voxels",
                flags.len(),
                dims.n_voxels()
            )));
        }
        let indices: Vec<usize> = flags
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect();
        Ok(Mask {
            dims,
            flags,
            indices,
        })
    }

    /// Mask covering the whole volume.
    pub fn full(dims: Dims) -> Self {
        let n = dims.n_voxels();
        Mask {
            dims,
            flags: vec![true; n],
            indices: (0..n).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn contains(&self, j: usize) -> bool {
        self.flags[j]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Linear indices of masked voxels, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Dilate along the coordinate axes: a voxel enters the mask if it
    /// lies within `steps` voxels of a masked voxel along a single
    /// axis. A point dilated by 2 becomes the 13-voxel axis cross.
    pub fn dilate_axes(&self, steps: usize) -> Mask {
        let d = self.dims;
        let mut flags = self.flags.clone();
        for &j in &self.indices {
            let (x, y, z) = d.coords(j);
            for s in 1..=steps {
                if x >= s {
                    flags[d.index(x - s, y, z)] = true;
                }
                if x + s < d.nx {
                    flags[d.index(x + s, y, z)] = true;
                }
                if y >= s {
                    flags[d.index(x, y - s, z)] = true;
                }
                if y + s < d.ny {
                    flags[d.index(x, y + s, z)] = true;
                }
                if z >= s {
                    flags[d.index(x, y, z - s)] = true;
                }
                if z + s < d.nz {
                    flags[d.index(x, y, z + s)] = true;
                }
            }
        }
        Mask::from_flags(d, flags).expect("dilation preserves shape")
    }
}
