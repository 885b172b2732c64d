//! Volumetric data types and the crop/embed protocol.
//!
//! All fields are dense, isotropic, and linearized x-fastest:
//! `index = x + nx * (y + ny * z)`.

mod crop;
mod io;
mod phantom;

pub use crop::{crop_centered, embed, CropSpec};
pub use io::{
    load_anatomy, load_volume, save_anatomy, save_volume, volume_paths, VolumeHeader, ANATOMY_MANIFEST, VOLUME_VERSION,
};
pub use phantom::gen_phantom;

use crate::error::{Error, Result};

/// Dense 3D grid of real values with isotropic voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField3D {
    dims: [usize; 3],
    spacing_mm: f64,
    data: Vec<f64>,
}

impl ScalarField3D {
    pub fn new(dims: [usize; 3], spacing_mm: f64, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDims(format!("{dims:?} has a zero extent")));
        }
        if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
            return Err(Error::InvalidParam(format!("spacing_mm must be > 0, got {spacing_mm}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidDims(format!(
                "data length {} does not match {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        Ok(Self { dims, spacing_mm, data })
    }

    pub fn filled(dims: [usize; 3], spacing_mm: f64, value: f64) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing_mm, vec![value; n])
    }

    pub fn zeros(dims: [usize; 3], spacing_mm: f64) -> Result<Self> {
        Self::filled(dims, spacing_mm, 0.0)
    }

    /// Builds a field by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing_mm: f64,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing_mm, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`index`](Self::index).
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let yz = i / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        p.iter()
            .zip(self.dims.iter())
            .all(|(&c, &d)| c >= 0 && (c as usize) < d)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }
}

/// Tolerance on the tissue probability sum; volume files store f32.
const PROB_SUM_TOL: f64 = 1e-6;

/// Probabilistic tissue maps (white matter, grey matter, CSF).
#[derive(Debug, Clone, PartialEq)]
pub struct Anatomy {
    pub wm: ScalarField3D,
    pub gm: ScalarField3D,
    pub csf: ScalarField3D,
}

impl Anatomy {
    pub fn new(wm: ScalarField3D, gm: ScalarField3D, csf: ScalarField3D) -> Result<Self> {
        wm.same_shape(&gm)?;
        wm.same_shape(&csf)?;
        if wm.spacing_mm() != gm.spacing_mm() || wm.spacing_mm() != csf.spacing_mm() {
            return Err(Error::InvalidParam("tissue maps disagree on spacing".into()));
        }
        for i in 0..wm.len() {
            let (w, g, c) = (wm.data[i], gm.data[i], csf.data[i]);
            if w < 0.0 || g < 0.0 || c < 0.0 || w + g + c > 1.0 + PROB_SUM_TOL {
                return Err(Error::InvalidParam(format!(
                    "tissue probabilities invalid at voxel {:?}: wm={w}, gm={g}, csf={c}",
                    wm.coords(i)
                )));
            }
        }
        Ok(Self { wm, gm, csf })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.wm.dims()
    }

    pub fn spacing_mm(&self) -> f64 {
        self.wm.spacing_mm()
    }

    /// Combined WM+GM fraction at linear index `i`.
    #[inline]
    pub fn tissue(&self, i: usize) -> f64 {
        self.wm.data[i] + self.gm.data[i]
    }

    /// Voxels where tumor cells may live: `p_w + p_g > threshold`.
    pub fn domain_mask(&self, threshold: f64) -> Vec<bool> {
        (0..self.wm.len()).map(|i| self.tissue(i) > threshold).collect()
    }

    /// Crops all three tissue maps with zero padding.
    pub fn crop(&self, spec: &CropSpec) -> Result<Anatomy> {
        Ok(Anatomy {
            wm: crop_centered(&self.wm, spec, 0.0)?,
            gm: crop_centered(&self.gm, spec, 0.0)?,
            csf: crop_centered(&self.csf, spec, 0.0)?,
        })
    }
}

/// Maps a fractional coordinate in `[0, 1]^3` to the voxel that contains it.
pub fn fraction_to_voxel(frac: [f64; 3], dims: [usize; 3]) -> [usize; 3] {
    let mut v = [0usize; 3];
    for a in 0..3 {
        let f = frac[a].clamp(0.0, 1.0);
        v[a] = ((f * dims[a] as f64).floor() as usize).min(dims[a] - 1);
    }
    v
}

/// Fractional coordinate of a voxel center; inverse of [`fraction_to_voxel`].
pub fn voxel_to_fraction(v: [usize; 3], dims: [usize; 3]) -> [f64; 3] {
    let mut f = [0.0; 3];
    for a in 0..3 {
        f[a] = (v[a] as f64 + 0.5) / dims[a] as f64;
    }
    f
}
