//! Imaging likelihoods linking a tumor density to binary MRI segmentations
//! (T1c, FLAIR) and a normalized PET signal, plus a synthetic-scan generator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{load_volume, save_volume, Anatomy, ScalarField3D};

pub const ALPHA_EPS: f64 = 1e-7;
pub const OBSERVATION_MANIFEST: &str = "observation.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingParams {
    pub uc_t1c: f64,
    pub uc_flair: f64,
    pub sigma_alpha: f64,
    pub b: f64,
    pub sigma: f64,
}

impl ImagingParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("uc_t1c", self.uc_t1c), ("uc_flair", self.uc_flair)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParam(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        for (name, v) in [("sigma_alpha", self.sigma_alpha), ("b", self.b), ("sigma", self.sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Binary segmentations, PET signal and the voxel set the likelihood runs over.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y_t1c: ScalarField3D,
    pub y_flair: ScalarField3D,
    pub y_pet: ScalarField3D,
    pub roi: ScalarField3D,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    t1c: String,
    flair: String,
    pet: String,
    roi: String,
}

impl Observation {
    pub fn new(y_t1c: ScalarField3D, y_flair: ScalarField3D, y_pet: ScalarField3D, roi: ScalarField3D) -> Result<Self> {
        for f in [&y_flair, &y_pet, &roi] {
            y_t1c.same_shape(f)?;
        }
        for (name, f) in [("t1c", &y_t1c), ("flair", &y_flair), ("roi", &roi)] {
            if f.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidParam(format!("{name} map must be binary")));
            }
        }
        if y_pet.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParam("PET signal must lie in [0, 1]".into()));
        }
        Ok(Self {
            y_t1c,
            y_flair,
            y_pet,
            roi,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.y_t1c.dims()
    }

    /// Writes the four volumes and `observation.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            version: 1,
            t1c: "t1c".into(),
            flair: "flair".into(),
            pet: "pet".into(),
            roi: "roi".into(),
        };
        save_volume(&self.y_t1c, &dir.join(&manifest.t1c))?;
        save_volume(&self.y_flair, &dir.join(&manifest.flair))?;
        save_volume(&self.y_pet, &dir.join(&manifest.pet))?;
        save_volume(&self.roi, &dir.join(&manifest.roi))?;
        let path = dir.join(OBSERVATION_MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Reads an observation from a directory holding `observation.json` or
    /// from the manifest path itself.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(OBSERVATION_MANIFEST) } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::MalformedHeader {
            path: manifest_path.clone(),
            msg: e.to_string(),
        })?;
        if m.version != 1 {
            return Err(Error::UnsupportedVersion(m.version));
        }
        Self::new(
            load_volume(&dir.join(&m.t1c))?,
            load_volume(&dir.join(&m.flair))?,
            load_volume(&dir.join(&m.pet))?,
            load_volume(&dir.join(&m.roi))?,
        )
    }
}

/// Double logistic sigmoid before clamping; `sign(0) = 0`.
pub fn alpha_raw(u: f64, u_c: f64, sigma_alpha: f64) -> f64 {
    let d = u - u_c;
    let sign = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    0.5 + 0.5 * sign * (1.0 - (-(d * d) / (sigma_alpha * sigma_alpha)).exp())
}

/// Probability of a positive segmentation voxel, clamped away from 0 and 1.
pub fn alpha(u: f64, u_c: f64, sigma_alpha: f64) -> f64 {
    alpha_raw(u, u_c, sigma_alpha).clamp(ALPHA_EPS, 1.0 - ALPHA_EPS)
}

fn check_shapes(fields: &[&ScalarField3D]) -> Result<()> {
    fields.windows(2).try_for_each(|w| w[0].same_shape(w[1]))
}

/// Bernoulli log-likelihood of a binary segmentation over the ROI.
pub fn loglik_mri(y: &ScalarField3D, u: &ScalarField3D, u_c: f64, sigma_alpha: f64, roi: &ScalarField3D) -> Result<f64> {
    check_shapes(&[y, u, roi])?;
    let mut sum = 0.0;
    for ((&yi, &ui), &ri) in y.data().iter().zip(u.data()).zip(roi.data()) {
        if ri > 0.5 {
            let a = alpha(ui, u_c, sigma_alpha);
            sum += if yi > 0.5 { a.ln() } else { (1.0 - a).ln() };
        }
    }
    Ok(sum)
}

/// Gaussian log-likelihood of the PET signal `y ~ N(b·u, σ²)` over the ROI.
pub fn loglik_pet(y: &ScalarField3D, u: &ScalarField3D, b: f64, sigma: f64, roi: &ScalarField3D) -> Result<f64> {
    check_shapes(&[y, u, roi])?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!("sigma = {sigma} must be positive")));
    }
    let norm = (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for ((&yi, &ui), &ri) in y.data().iter().zip(u.data()).zip(roi.data()) {
        if ri > 0.5 {
            let r = yi - b * ui;
            sum += -norm - r * r * inv;
        }
    }
    Ok(sum)
}

/// T1c, FLAIR and PET treated as independent.
pub fn total_loglik(obs: &Observation, u: &ScalarField3D, theta: &ImagingParams) -> Result<f64> {
    Ok(loglik_mri(&obs.y_t1c, u, theta.uc_t1c, theta.sigma_alpha, &obs.roi)?
        + loglik_mri(&obs.y_flair, u, theta.uc_flair, theta.sigma_alpha, &obs.roi)?
        + loglik_pet(&obs.y_pet, u, theta.b, theta.sigma, &obs.roi)?)
}

/// Samples scans from the generative model. The ROI is the tissue domain
/// (`p_w + p_g > roi_threshold`).
pub fn synth_observation(
    u_true: &ScalarField3D,
    theta: &ImagingParams,
    anatomy: &Anatomy,
    roi_threshold: f64,
    rng_seed: u64,
) -> Result<Observation> {
    theta.validate()?;
    if u_true.dims() != anatomy.dims() {
        return Err(Error::DimMismatch(u_true.dims(), anatomy.dims()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = Normal::new(0.0, theta.sigma).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let (dims, h) = (u_true.dims(), u_true.spacing_mm());
    let n = u_true.len();
    let (mut t1c, mut flair, mut pet) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for &u in u_true.data() {
        // unclamped alpha so the hard-threshold limit is exact
        let at = alpha_raw(u, theta.uc_t1c, theta.sigma_alpha);
        let af = alpha_raw(u, theta.uc_flair, theta.sigma_alpha);
        t1c.push(f64::from(u8::from(rng.random::<f64>() < at)));
        flair.push(f64::from(u8::from(rng.random::<f64>() < af)));
        pet.push((theta.b * u + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    let roi = anatomy.domain_mask(roi_threshold).into_iter().map(|m| f64::from(u8::from(m))).collect();
    Observation::new(
        ScalarField3D::new(dims, h, t1c)?,
        ScalarField3D::new(dims, h, flair)?,
        ScalarField3D::new(dims, h, pet)?,
        ScalarField3D::new(dims, h, roi)?,
    )
}
