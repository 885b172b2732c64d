//! Synthetic head phantom: ellipsoidal brain with a WM core, GM shell, a CSF
//! rim between brain and skull, and one to three ventricle-like CSF inclusions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Anatomy, ScalarField3D};
use crate::error::{Error, Result};

pub const MIN_PHANTOM_SIDE: usize = 16;

/// Half-width (voxels) of the cosine ramp at every tissue boundary.
const RAMP_HALF_WIDTH: f64 = 1.5;

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    /// Approximate signed distance in voxels (negative inside).
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum();
        let min_axis = self.axes.iter().copied().fold(f64::INFINITY, f64::min);
        (r2.sqrt() - 1.0) * min_axis
    }

    /// 1 inside, 0 outside, cosine ramp of width 3 voxels across the boundary.
    fn inside(&self, p: [f64; 3]) -> f64 {
        let d = self.signed_distance(p);
        if d <= -RAMP_HALF_WIDTH {
            1.0
        } else if d >= RAMP_HALF_WIDTH {
            0.0
        } else {
            0.5 + 0.5 * (std::f64::consts::PI * (d + RAMP_HALF_WIDTH) / (2.0 * RAMP_HALF_WIDTH)).cos()
        }
    }
}

pub fn gen_phantom(dims: [usize; 3], spacing_mm: f64, rng_seed: u64) -> Result<Anatomy> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_SIDE) {
        return Err(Error::InvalidDims(format!(
            "phantom needs at least {MIN_PHANTOM_SIDE} voxels per axis, got {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let d = dims.map(|v| v as f64);

    let mut center = [0.0; 3];
    let mut head_axes = [0.0; 3];
    for a in 0..3 {
        center[a] = d[a] / 2.0 + rng.random_range(-0.02..0.02) * d[a];
        head_axes[a] = d[a] * 0.44 * rng.random_range(0.96..1.04);
    }
    let head = Ellipsoid { center, axes: head_axes };
    let brain = Ellipsoid {
        center,
        axes: head_axes.map(|h| h - 2.0),
    };
    let wm_scale = rng.random_range(0.55..0.7);
    let wm = Ellipsoid {
        center,
        axes: brain.axes.map(|b| b * wm_scale),
    };
    let n_vent = rng.random_range(1..=3);
    let ventricles: Vec<Ellipsoid> = (0..n_vent)
        .map(|_| {
            let mut c = [0.0; 3];
            let mut ax = [0.0; 3];
            for a in 0..3 {
                c[a] = center[a] + rng.random_range(-0.3..0.3) * wm.axes[a];
                ax[a] = (brain.axes[a] * rng.random_range(0.12..0.25)).max(1.5);
            }
            Ellipsoid { center: c, axes: ax }
        })
        .collect();

    let n: usize = dims.iter().product();
    let (mut pw, mut pg, mut pc) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let h = head.inside(p);
                let b = brain.inside(p) * h;
                let w = wm.inside(p);
                let v = ventricles.iter().map(|e| e.inside(p)).fold(0.0, f64::max);
                let tissue = b * (1.0 - v);
                pw.push(tissue * w);
                pg.push(tissue * (1.0 - w));
                pc.push((h - b) + b * v);
            }
        }
    }
    Anatomy::new(
        ScalarField3D::new(dims, spacing_mm, pw)?,
        ScalarField3D::new(dims, spacing_mm, pg)?,
        ScalarField3D::new(dims, spacing_mm, pc)?,
    )
}
