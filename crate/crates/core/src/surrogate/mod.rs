//! Forward-only inference for the geometry-aware tumor surrogate.
//!
//! The network encodes a cropped anatomy (WM, GM, CSF) into a coarse latent
//! volume, concatenates a linear embedding of the normalized `{D_w, rho, T}`
//! parameters, and decodes back to a full-resolution tumor density centered on
//! the seed. Weights come from the `TGSW` exchange format (see [`weights`]).

mod net;
mod tensor;
pub mod weights;

pub use net::{anatomy_to_activation, decode, embed_params, encode_anatomy, predict, predict_activation};
pub use tensor::{conv3d, upsample_nn, Activation};
pub use weights::{load_weights, save_weights, SurrogateWeights, TensorData};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Crop side length; must be a power of two.
    pub side: usize,
    pub channels: usize,
    /// Convolutions per residual block.
    pub convs_per_block: usize,
    /// Number of stride-2 downsamplings.
    pub levels: usize,
    pub param_count: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            side: 32,
            channels: 8,
            convs_per_block: 2,
            levels: 3,
            param_count: 3,
        }
    }

    /// 64³ crops, 128 channels, 8³ latent.
    pub fn paper() -> Self {
        Self {
            side: 64,
            channels: 128,
            ..Self::desk()
        }
    }

    pub fn latent_side(&self) -> usize {
        self.side >> self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("net: {m}")));
        if !self.side.is_power_of_two() {
            return bad(format!("side {} is not a power of two", self.side));
        }
        if self.levels >= usize::BITS as usize || self.side >> self.levels == 0 {
            return bad(format!("side {} cannot be halved {} times", self.side, self.levels));
        }
        if self.channels == 0 || self.convs_per_block == 0 {
            return bad("channels and convs_per_block must be positive".into());
        }
        if self.param_count != 3 {
            return bad(format!("param_count must be 3 (D_w, rho, T), got {}", self.param_count));
        }
        Ok(())
    }
}

/// Min-max ranges used to normalize the decoder inputs; stored in the weight
/// file so inference always uses the training scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    #[serde(rename = "D_w")]
    pub d_w: [f64; 2],
    pub rho: [f64; 2],
    #[serde(rename = "T")]
    pub t: [f64; 2],
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            d_w: [0.01, 0.08],
            rho: [0.0001, 0.03],
            t: [50.0, 1000.0],
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("D_w", self.d_w), ("rho", self.rho), ("T", self.t)] {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::Config(format!("param range {name} = [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    /// Maps raw parameters to `[0, 1]^3`, rejecting anything outside the
    /// training box.
    pub fn normalize(&self, p: &SurrogateParams) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        for (k, (name, v, [lo, hi])) in [("D_w", p.d_w, self.d_w), ("rho", p.rho, self.rho), ("T", p.t, self.t)]
            .into_iter()
            .enumerate()
        {
            let n = (v - lo) / (hi - lo);
            if !(0.0..=1.0).contains(&n) {
                return Err(Error::OutOfTrainingRange { name, value: v, lo, hi });
            }
            out[k] = n;
        }
        Ok(out)
    }
}

/// The decoder's conditioning parameters. The seed location is implicit: crops
/// are centered on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    #[serde(rename = "D_w")]
    pub d_w: f64,
    pub rho: f64,
    #[serde(rename = "T")]
    pub t: f64,
}
