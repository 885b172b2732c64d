//! Training-set export: random growth parameters on phantom anatomies, solved
//! numerically and cropped around the seed.
//!
//! ```text
//! <out>/dataset.json              manifest (ranges, crop side, sample list)
//! <out>/sample_00000/params.json  {"D_w", "rho", "T", "x", "y", "z", "anatomy", "seed_voxel"}
//! <out>/sample_00000/{wm,gm,csf,tumor}.{json,raw}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::{simulate, GrowthParams, SolverConfig};
use crate::surrogate::ParamRanges;
use crate::volumes::{crop_centered, fraction_to_voxel, save_volume, Anatomy, CropSpec};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_VERSION: u32 = 1;
pub const T_STEP_DAYS: f64 = 50.0;
pub const MAX_SEED_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    #[serde(flatten)]
    pub growth: GrowthParams,
    /// Index into the manifest's anatomy list.
    pub anatomy: usize,
    pub seed_voxel: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub dir: String,
    pub anatomy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub crop_side: usize,
    pub seed: u64,
    pub param_ranges: ParamRanges,
    pub anatomies: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_slice(&text).map_err(|e| Error::MalformedHeader {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if m.version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion(m.version));
        }
        Ok(m)
    }
}

/// Uniform seed in `[0,1]^3` whose voxel has WM+GM above `threshold`.
pub fn draw_seed<R: Rng>(anatomy: &Anatomy, threshold: f64, rng: &mut R) -> Result<[f64; 3]> {
    let dims = anatomy.dims();
    for _ in 0..MAX_SEED_ATTEMPTS {
        let f = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let v = fraction_to_voxel(f, dims);
        if anatomy.tissue(anatomy.wm.index(v[0], v[1], v[2])) > threshold {
            return Ok(f);
        }
    }
    Err(Error::NoValidSeed(MAX_SEED_ATTEMPTS))
}

/// Draws `D_w`, `rho` uniformly in their ranges and `T` uniformly from the
/// multiples of 50 days inside its range.
pub fn draw_params<R: Rng>(ranges: &ParamRanges, anatomy: &Anatomy, threshold: f64, rng: &mut R) -> Result<GrowthParams> {
    let d_w = rng.random_range(ranges.d_w[0]..=ranges.d_w[1]);
    let rho = rng.random_range(ranges.rho[0]..=ranges.rho[1]);
    let k_lo = (ranges.t[0] / T_STEP_DAYS).ceil() as u32;
    let k_hi = (ranges.t[1] / T_STEP_DAYS).floor() as u32;
    if k_lo > k_hi {
        return Err(Error::Config(format!("T range {:?} holds no multiple of {T_STEP_DAYS}", ranges.t)));
    }
    let t = rng.random_range(k_lo..=k_hi) as f64 * T_STEP_DAYS;
    let seed = draw_seed(anatomy, threshold, rng)?;
    Ok(GrowthParams::new(d_w, rho, seed, t))
}

pub struct DatasetSpec<'a> {
    pub anatomies: &'a [Anatomy],
    /// Recorded in the manifest; typically the source directories.
    pub anatomy_names: Vec<String>,
    pub count: usize,
    pub crop_side: usize,
    pub seed: u64,
    pub ranges: ParamRanges,
    pub solver: SolverConfig,
}

fn sample_dir(i: usize) -> String {
    format!("sample_{i:05}")
}

/// Generates one sample; anatomies are used round-robin and every sample
/// has its own RNG stream, so output does not depend on thread count.
pub fn generate_sample(spec: &DatasetSpec<'_>, i: usize) -> Result<(SampleParams, [crate::volumes::ScalarField3D; 4])> {
    let a = i % spec.anatomies.len();
    let anatomy = &spec.anatomies[a];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    let growth = draw_params(&spec.ranges, anatomy, spec.solver.csf_domain_threshold, &mut rng)?;
    let u = simulate(anatomy, &growth, &spec.solver)?;
    let sv = fraction_to_voxel(growth.seed(), anatomy.dims());
    let crop = CropSpec::at_voxel(sv, spec.crop_side);
    let c = anatomy.crop(&crop)?;
    let tumor = crop_centered(&u, &crop, 0.0)?;
    Ok((
        SampleParams {
            growth,
            anatomy: a,
            seed_voxel: sv,
        },
        [c.wm, c.gm, c.csf, tumor],
    ))
}

pub fn generate(spec: &DatasetSpec<'_>, out: &Path) -> Result<DatasetManifest> {
    if spec.anatomies.is_empty() {
        return Err(Error::Config("gen-dataset needs at least one anatomy".into()));
    }
    if spec.crop_side == 0 {
        return Err(Error::Config("crop side must be positive".into()));
    }
    spec.ranges.validate()?;
    spec.solver.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let samples = (0..spec.count)
        .into_par_iter()
        .map(|i| -> Result<SampleEntry> {
            let (params, vols) = generate_sample(spec, i)?;
            let dir = sample_dir(i);
            let path: PathBuf = out.join(&dir);
            for (name, v) in ["wm", "gm", "csf", "tumor"].iter().zip(&vols) {
                save_volume(v, &path.join(name))?;
            }
            let p = path.join("params.json");
            fs::write(&p, serde_json::to_vec_pretty(&params)?).map_err(|e| Error::io(&p, e))?;
            Ok(SampleEntry {
                id: dir.clone(),
                dir,
                anatomy: params.anatomy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        crop_side: spec.crop_side,
        seed: spec.seed,
        param_ranges: spec.ranges,
        anatomies: spec.anatomy_names.clone(),
        samples,
    };
    let path = out.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
