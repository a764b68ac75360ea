//! 3-D scalar volume with physical spacing and origin, plus the coordinate
//! transforms and patch tiling every other module builds on.
//!
//! Axis convention: everything in memory is (z, y, x) ordered; world
//! coordinates are mm triples in the same (z, y, x) order. External formats
//! (MHD headers, CSV files) use (x, y, z) and are reordered at the boundary.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar volume on a regular axis-aligned grid.
#[derive(Debug, Clone)]
pub struct Volume {
    /// Voxel counts (D, H, W) = (z, y, x).
    pub dims: [usize; 3],
    /// mm per voxel along (z, y, x); all > 0.
    pub spacing: [f64; 3],
    /// World position (mm) of voxel (0, 0, 0).
    pub origin: [f64; 3],
    /// Row-major (z, y, x) intensities, length D*H*W.
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidShape(format!("volume dims {dims:?} overflow")))?;
        if n == 0 {
            return Err(Error::InvalidShape(format!("volume dims {dims:?} contain zero")));
        }
        if data.len() != n {
            return Err(Error::InvalidShape(format!(
                "volume dims {dims:?} want {n} voxels, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Config(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// World mm -> continuous voxel coordinate, per axis (w - origin) / spacing.
    pub fn world_to_voxel(&self, world: [f64; 3]) -> Result<[f64; 3]> {
        if world.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite world coordinate {world:?}")));
        }
        Ok([
            (world[0] - self.origin[0]) / self.spacing[0],
            (world[1] - self.origin[1]) / self.spacing[1],
            (world[2] - self.origin[2]) / self.spacing[2],
        ])
    }

    /// Continuous voxel coordinate -> world mm, per axis v * spacing + origin.
    pub fn voxel_to_world(&self, voxel: [f64; 3]) -> Result<[f64; 3]> {
        if voxel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite voxel coordinate {voxel:?}")));
        }
        Ok([
            voxel[0] * self.spacing[0] + self.origin[0],
            voxel[1] * self.spacing[1] + self.origin[1],
            voxel[2] * self.spacing[2] + self.origin[2],
        ])
    }

    /// True if the world point lies within the voxel-center bounding box.
    pub fn contains_world(&self, world: [f64; 3]) -> bool {
        match self.world_to_voxel(world) {
            Ok(v) => v
                .iter()
                .zip(&self.dims)
                .all(|(&c, &d)| c >= 0.0 && c <= (d - 1) as f64),
            Err(_) => false,
        }
    }
}

/// Clamp CT intensities to an HU window and map linearly onto [0, 1].
pub fn normalize_hu(volume: &Volume, window: (f32, f32)) -> Result<Volume> {
    let (lo, hi) = window;
    if lo >= hi {
        return Err(Error::Config(format!(
            "HU window must satisfy lo < hi, got ({lo}, {hi})"
        )));
    }
    let span = hi - lo;
    let mut out = volume.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = (v.clamp(lo, hi) - lo) / span);
    Ok(out)
}

pub const DEFAULT_HU_WINDOW: (f32, f32) = (-1000.0, 400.0);

/// Offsets along one axis so that patches of `patch` cover `dim` with the
/// given stride; the final patch is aligned to the end of the axis.
fn axis_offsets(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let last = dim - patch;
    let mut offs = Vec::new();
    let mut x = 0;
    while x < last {
        offs.push(x);
        x += stride;
    }
    offs.push(last);
    offs
}

/// Cut the volume into overlapping cubic patches of `patch_size`, padding
/// undersized volumes with zeros. Returns (patch tensor (1,1,P,P,P), voxel
/// offset of the patch origin). Every voxel is covered by at least one patch.
pub fn tile_patches(
    volume: &Volume,
    patch_size: usize,
    overlap: usize,
) -> Result<Vec<(Tensor, [usize; 3])>> {
    if overlap >= patch_size {
        return Err(Error::Config(format!(
            "overlap {overlap} must be smaller than patch size {patch_size}"
        )));
    }
    let stride = patch_size - overlap;
    let offs_z = axis_offsets(volume.dims[0], patch_size, stride);
    let offs_y = axis_offsets(volume.dims[1], patch_size, stride);
    let offs_x = axis_offsets(volume.dims[2], patch_size, stride);
    let mut patches = Vec::with_capacity(offs_z.len() * offs_y.len() * offs_x.len());
    for &oz in &offs_z {
        for &oy in &offs_y {
            for &ox in &offs_x {
                patches.push((
                    extract_patch(volume, [oz, oy, ox], patch_size)?,
                    [oz, oy, ox],
                ));
            }
        }
    }
    Ok(patches)
}

/// Copy a cubic window starting at `offset` into a (1,1,P,P,P) tensor,
/// zero-filling beyond the volume.
pub fn extract_patch(volume: &Volume, offset: [usize; 3], patch_size: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[1, 1, patch_size, patch_size, patch_size])?;
    let [d, h, w] = volume.dims;
    let data = t.data_mut();
    for pz in 0..patch_size {
        let z = offset[0] + pz;
        if z >= d {
            break;
        }
        for py in 0..patch_size {
            let y = offset[1] + py;
            if y >= h {
                break;
            }
            let x0 = offset[2];
            let n = patch_size.min(w.saturating_sub(x0));
            if n == 0 {
                continue;
            }
            let src = &volume.data[(z * h + y) * w + x0..][..n];
            let dst = &mut data[(pz * patch_size + py) * patch_size..][..n];
            dst.copy_from_slice(src);
        }
    }
    Ok(t)
}
