//! `TGSW` weight exchange format.
//!
//! ```text
//! b"TGSW" | u32 version (LE, =1) | u64 header length (LE) | JSON header | payloads
//! ```
//!
//! The JSON header holds `config` ([`NetConfig`]), `param_ranges`
//! ([`ParamRanges`]) and a `tensors` table mapping each name to
//! `{shape, dtype: "f32le", offset, length}`. `offset` is absolute from the
//! start of the file and `length` is in bytes. Payloads are written
//! contiguously in name order.
//!
//! Tensor names and shapes (`ch` = channels, `L` = latent side):
//!
//! | name | shape |
//! |------|-------|
//! | `enc.in.{weight,bias}` | `[ch,3,3,3,3]`, `[ch]` |
//! | `enc.block{l}.conv{j}.{weight,bias}` | `[ch,ch,3,3,3]`, `[ch]` |
//! | `enc.down{l}.{weight,bias}` | `[ch,ch,3,3,3]`, `[ch]` |
//! | `fc.{weight,bias}` | `[3·L³, 3]`, `[3·L³]` |
//! | `dec.in.{weight,bias}` | `[ch,ch+3,3,3,3]`, `[ch]` |
//! | `dec.block{l}.conv{j}.{weight,bias}` | `[ch,ch,3,3,3]`, `[ch]` |
//! | `dec.out.{weight,bias}` | `[1,ch,3,3,3]`, `[1]` |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NetConfig, ParamRanges};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TGSW";
pub const WEIGHTS_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidDims(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateWeights {
    config: NetConfig,
    ranges: ParamRanges,
    tensors: BTreeMap<String, TensorData>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    config: NetConfig,
    param_ranges: ParamRanges,
    tensors: BTreeMap<String, TensorEntry>,
}

fn conv_shape(out: usize, inp: usize) -> Vec<usize> {
    vec![out, inp, 3, 3, 3]
}

/// Every tensor the forward pass reads, in canonical order.
pub fn required_tensors(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let ch = cfg.channels;
    let latent = cfg.latent_side().pow(3) * 3;
    let mut v = Vec::new();
    let mut conv = |name: String, out: usize, inp: usize| {
        v.push((format!("{name}.weight"), conv_shape(out, inp)));
        v.push((format!("{name}.bias"), vec![out]));
    };
    conv("enc.in".into(), ch, 3);
    for l in 0..cfg.levels {
        for j in 0..cfg.convs_per_block {
            conv(format!("enc.block{l}.conv{j}"), ch, ch);
        }
        conv(format!("enc.down{l}"), ch, ch);
    }
    conv("dec.in".into(), ch, ch + 3);
    for l in 0..cfg.levels {
        for j in 0..cfg.convs_per_block {
            conv(format!("dec.block{l}.conv{j}"), ch, ch);
        }
    }
    conv("dec.out".into(), 1, ch);
    v.push(("fc.weight".into(), vec![latent, 3]));
    v.push(("fc.bias".into(), vec![latent]));
    v
}

impl SurrogateWeights {
    /// Validates that every required tensor exists with the expected shape
    /// and finite values. Extra tensors are kept untouched.
    pub fn new(config: NetConfig, ranges: ParamRanges, tensors: BTreeMap<String, TensorData>) -> Result<Self> {
        config.validate()?;
        ranges.validate()?;
        for (name, shape) in required_tensors(&config) {
            let t = tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    actual: t.shape.clone(),
                });
            }
        }
        for (name, t) in &tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::InvalidDims(format!("tensor {name} shape {:?} vs {} values", t.shape, t.data.len())));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(Self { config, ranges, tensors })
    }

    /// Uniform fan-in scaled initialization; deterministic per seed.
    pub fn random(config: NetConfig, ranges: ParamRanges, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in required_tensors(&config) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                let base = if name == "dec.out.bias" { 0.5 } else { 0.0 };
                (0..n).map(|_| base + rng.random_range(-0.05..0.05)).collect()
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (3.0 / fan_in as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            tensors.insert(name, TensorData { shape, data });
        }
        Self::new(config, ranges, tensors)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn ranges(&self) -> &ParamRanges {
        &self.ranges
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorData> {
        &self.tensors
    }

    /// Looks up a tensor that [`new`](Self::new) guaranteed to exist.
    pub fn tensor(&self, name: &str) -> &[f32] {
        &self.tensors[name].data
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut rel = 0u64;
        let mut layout = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let len = (t.data.len() * 4) as u64;
            layout.push((name, t, rel, len));
            rel += len;
        }
        // absolute offsets depend on the header's own length; iterate to a fixed point
        let mut header_len = 0usize;
        let header = loop {
            let base = (PREAMBLE + header_len) as u64;
            let header = FileHeader {
                config: self.config,
                param_ranges: self.ranges,
                tensors: layout
                    .iter()
                    .map(|(name, t, off, len)| {
                        (
                            (*name).clone(),
                            TensorEntry {
                                shape: t.shape.clone(),
                                dtype: "f32le".into(),
                                offset: base + off,
                                length: *len,
                            },
                        )
                    })
                    .collect(),
            };
            let bytes = serde_json::to_vec(&header)?;
            if bytes.len() == header_len {
                break bytes;
            }
            header_len = bytes.len();
        };
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + rel as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t, _, _) in &layout {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::PayloadLength {
                expected: (PREAMBLE + header_len) as u64,
                actual: bytes.len() as u64,
            })?;
        let header: FileHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| Error::MalformedHeader {
            path: "<weights>".into(),
            msg: e.to_string(),
        })?;

        // check names and shapes before touching payloads so errors name the tensor
        for (name, shape) in required_tensors(&header.config) {
            let e = header.tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if e.shape != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    actual: e.shape.clone(),
                });
            }
        }
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            if e.dtype != "f32le" {
                return Err(Error::MalformedHeader {
                    path: "<weights>".into(),
                    msg: format!("tensor {name} has dtype {:?}", e.dtype),
                });
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.length);
            if e.length != (n * 4) as u64 || e.offset < header_end as u64 || end.is_none_or(|end| end > bytes.len() as u64) {
                return Err(Error::PayloadLength {
                    expected: (n * 4) as u64,
                    actual: e.length,
                });
            }
            let raw = &bytes[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.insert(name, TensorData { shape: e.shape, data });
        }
        Self::new(header.config, header.param_ranges, tensors)
    }
}

pub fn save_weights(w: &SurrogateWeights, path: &Path) -> Result<()> {
    let bytes = w.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<SurrogateWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SurrogateWeights::from_bytes(&bytes)
}
