//! Raw volume files: a JSON sidecar header plus a little-endian f32 payload.
//!
//! ```text
//! <name>.json  {"version":1,"dims":[nx,ny,nz],"spacing_mm":s,"dtype":"f32le","order":"x-fastest"}
//! <name>.raw   nx*ny*nz little-endian IEEE-754 f32, x-fastest
//! ```
//!
//! Values are held as f64 in memory and narrowed to f32 on save, so a
//! save/load round trip is bit-exact for any field whose values are already
//! f32-representable (in particular, any field that was itself loaded).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Anatomy, ScalarField3D};
use crate::error::{Error, Result};

pub const VOLUME_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub dtype: String,
    pub order: String,
}

/// Sidecar paths for a volume named `base`. A trailing `.json` or `.raw` on
/// `base` is ignored, so either file may be passed.
pub fn volume_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s
        .strip_suffix(".json")
        .or_else(|| s.strip_suffix(".raw"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.json")), PathBuf::from(format!("{stem}.raw")))
}

pub fn save_volume(field: &ScalarField3D, base: &Path) -> Result<()> {
    let (json_path, raw_path) = volume_paths(base);
    let header = VolumeHeader {
        version: VOLUME_VERSION,
        dims: field.dims(),
        spacing_mm: field.spacing_mm(),
        dtype: "f32le".into(),
        order: "x-fastest".into(),
    };
    let mut payload = Vec::with_capacity(field.len() * 4);
    for &v in field.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(dir) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&json_path, serde_json::to_vec(&header)?).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn load_volume(base: &Path) -> Result<ScalarField3D> {
    let (json_path, raw_path) = volume_paths(base);
    let text = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let malformed = |msg: String| Error::MalformedHeader {
        path: json_path.clone(),
        msg,
    };
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| malformed(e.to_string()))?;
    // check the version before the schema so future formats fail clearly
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == VOLUME_VERSION as u64 => {}
        Some(v) => return Err(Error::UnsupportedVersion(v as u32)),
        None => return Err(malformed("missing or non-integer \"version\"".into())),
    }
    let header: VolumeHeader = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(malformed(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "x-fastest" {
        return Err(malformed(format!("unsupported order {:?}", header.order)));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(malformed(format!("zero extent in dims {:?}", header.dims)));
    }

    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n: usize = header.dims.iter().product();
    if payload.len() != n * 4 {
        return Err(Error::PayloadLength {
            expected: (n * 4) as u64,
            actual: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ScalarField3D::new(header.dims, header.spacing_mm, data).map_err(|e| malformed(e.to_string()))
}

pub const ANATOMY_MANIFEST: &str = "anatomy.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnatomyManifest {
    version: u32,
    wm: String,
    gm: String,
    csf: String,
}

/// Writes `wm`, `gm`, `csf` volumes and `anatomy.json` into `dir`.
pub fn save_anatomy(anatomy: &Anatomy, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = AnatomyManifest {
        version: VOLUME_VERSION,
        wm: "wm".into(),
        gm: "gm".into(),
        csf: "csf".into(),
    };
    save_volume(&anatomy.wm, &dir.join(&m.wm))?;
    save_volume(&anatomy.gm, &dir.join(&m.gm))?;
    save_volume(&anatomy.csf, &dir.join(&m.csf))?;
    let path = dir.join(ANATOMY_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))
}

/// Reads an anatomy from a directory holding `anatomy.json` or from the
/// manifest path itself.
pub fn load_anatomy(path: &Path) -> Result<Anatomy> {
    let manifest = if path.is_dir() { path.join(ANATOMY_MANIFEST) } else { path.to_path_buf() };
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let m: AnatomyManifest = serde_json::from_slice(&text).map_err(|e| Error::MalformedHeader {
        path: manifest.clone(),
        msg: e.to_string(),
    })?;
    if m.version != VOLUME_VERSION {
        return Err(Error::UnsupportedVersion(m.version));
    }
    Anatomy::new(
        load_volume(&dir.join(&m.wm))?,
        load_volume(&dir.join(&m.gm))?,
        load_volume(&dir.join(&m.csf))?,
    )
}
