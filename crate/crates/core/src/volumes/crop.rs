use serde::{Deserialize, Serialize};

use super::ScalarField3D;
use crate::error::{Error, Result};

/// A cubic window of `side` voxels centered at `center`.
///
/// The window's low corner is `center - side / 2` (integer division), so for
/// even sides the center voxel sits at local offset `side / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub center: [i64; 3],
    pub side: usize,
}

impl CropSpec {
    pub fn new(center: [i64; 3], side: usize) -> Self {
        Self { center, side }
    }

    pub fn at_voxel(center: [usize; 3], side: usize) -> Self {
        Self::new(center.map(|c| c as i64), side)
    }

    fn origin(center: [i64; 3], extent: [usize; 3]) -> [i64; 3] {
        [
            center[0] - (extent[0] / 2) as i64,
            center[1] - (extent[1] / 2) as i64,
            center[2] - (extent[2] / 2) as i64,
        ]
    }
}

/// Extracts a `side³` window around `spec.center`; voxels outside the source
/// are filled with `pad_value`.
pub fn crop_centered(field: &ScalarField3D, spec: &CropSpec, pad_value: f64) -> Result<ScalarField3D> {
    if spec.side == 0 {
        return Err(Error::InvalidDims("crop side must be positive".into()));
    }
    if !field.contains(spec.center) {
        return Err(Error::SeedOutsideVolume(spec.center));
    }
    let side = spec.side;
    let origin = CropSpec::origin(spec.center, [side; 3]);
    let [nx, ny, nz] = field.dims().map(|d| d as i64);
    let src = field.data();
    let mut out = vec![pad_value; side * side * side];
    for lz in 0..side {
        let sz = origin[2] + lz as i64;
        if sz < 0 || sz >= nz {
            continue;
        }
        for ly in 0..side {
            let sy = origin[1] + ly as i64;
            if sy < 0 || sy >= ny {
                continue;
            }
            let row_out = side * (ly + side * lz);
            let row_src = (nx * (sy + ny * sz)) as usize;
            // contiguous x-run that overlaps the source
            let x0 = (-origin[0]).max(0);
            let x1 = (nx - origin[0]).min(side as i64);
            if x0 >= x1 {
                continue;
            }
            let (x0, x1) = (x0 as usize, x1 as usize);
            let s0 = (origin[0] + x0 as i64) as usize;
            out[row_out + x0..row_out + x1].copy_from_slice(&src[row_src + s0..row_src + s0 + (x1 - x0)]);
        }
    }
    ScalarField3D::new([side; 3], field.spacing_mm(), out)
}

/// Places `crop` into a `target_dims` volume so that its center lands on
/// `center`. Overhanging voxels are discarded; everything else is `fill`.
pub fn embed(crop: &ScalarField3D, target_dims: [usize; 3], center: [i64; 3], fill: f64) -> Result<ScalarField3D> {
    let cd = crop.dims();
    let origin = CropSpec::origin(center, cd);
    let mut out = ScalarField3D::filled(target_dims, crop.spacing_mm(), fill)?;
    let [tx, ty, tz] = target_dims.map(|d| d as i64);
    for lz in 0..cd[2] {
        let z = origin[2] + lz as i64;
        if z < 0 || z >= tz {
            continue;
        }
        for ly in 0..cd[1] {
            let y = origin[1] + ly as i64;
            if y < 0 || y >= ty {
                continue;
            }
            for lx in 0..cd[0] {
                let x = origin[0] + lx as i64;
                if x < 0 || x >= tx {
                    continue;
                }
                out.set(x as usize, y as usize, z as usize, crop.get(lx, ly, lz));
            }
        }
    }
    Ok(out)
}
