use super::tensor::{conv3d, upsample_nn, Activation};
use super::{SurrogateParams, SurrogateWeights};
use crate::error::{Error, Result};
use crate::volumes::{Anatomy, ScalarField3D};

fn conv(w: &SurrogateWeights, name: &str, x: &Activation, out_ch: usize, stride: usize) -> Result<Activation> {
    conv3d(
        x,
        w.tensor(&format!("{name}.weight")),
        w.tensor(&format!("{name}.bias")),
        out_ch,
        stride,
    )
}

/// `x + F(x)` where `F` is `convs_per_block` convolutions, each followed by
/// ReLU.
fn residual(w: &SurrogateWeights, prefix: &str, x: &mut Activation) -> Result<()> {
    let cfg = w.config();
    let mut h = conv(w, &format!("{prefix}.conv0"), x, cfg.channels, 1)?;
    h.relu_inplace();
    for j in 1..cfg.convs_per_block {
        h = conv(w, &format!("{prefix}.conv{j}"), &h, cfg.channels, 1)?;
        h.relu_inplace();
    }
    x.add_inplace(&h)
}

/// Stacks WM, GM, CSF as input channels.
pub fn anatomy_to_activation(anatomy: &Anatomy) -> Result<Activation> {
    let dims = anatomy.dims();
    let mut data = Vec::with_capacity(3 * anatomy.wm.len());
    for f in [&anatomy.wm, &anatomy.gm, &anatomy.csf] {
        data.extend(f.data().iter().map(|&v| v as f32));
    }
    Activation::new(3, dims, data)
}

pub fn encode_anatomy(w: &SurrogateWeights, input: &Activation) -> Result<Activation> {
    let cfg = w.config();
    let side = cfg.side;
    if input.dims() != [side; 3] {
        return Err(Error::DimMismatch([side; 3], input.dims()));
    }
    if input.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: input.channels(),
        });
    }
    let mut x = conv(w, "enc.in", input, cfg.channels, 1)?;
    x.relu_inplace();
    for l in 0..cfg.levels {
        residual(w, &format!("enc.block{l}"), &mut x)?;
        x = conv(w, &format!("enc.down{l}"), &x, cfg.channels, 2)?;
        x.relu_inplace();
    }
    Ok(x)
}

/// Linear map from normalized parameters to a 3-channel latent volume.
pub fn embed_params(w: &SurrogateWeights, norm: [f64; 3]) -> Activation {
    let l = w.config().latent_side();
    let weight = w.tensor("fc.weight");
    let bias = w.tensor("fc.bias");
    let data = bias
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let row = &weight[3 * i..3 * i + 3];
            b + row[0] * norm[0] as f32 + row[1] * norm[1] as f32 + row[2] * norm[2] as f32
        })
        .collect();
    Activation::new(3, [l; 3], data).expect("fc shape validated at load")
}

pub fn decode(w: &SurrogateWeights, latent: &Activation, norm: [f64; 3]) -> Result<Activation> {
    let cfg = w.config();
    let z = latent.concat(&embed_params(w, norm))?;
    let mut x = conv(w, "dec.in", &z, cfg.channels, 1)?;
    x.relu_inplace();
    for l in 0..cfg.levels {
        x = upsample_nn(&x, 2);
        residual(w, &format!("dec.block{l}"), &mut x)?;
    }
    let mut out = conv(w, "dec.out", &x, 1, 1)?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Full forward pass on a prepared input; `norm` must already be min-max scaled.
pub fn predict_activation(w: &SurrogateWeights, input: &Activation, norm: [f64; 3]) -> Result<Activation> {
    let latent = encode_anatomy(w, input)?;
    decode(w, &latent, norm)
}

/// Predicts the tumor density on a seed-centered crop.
pub fn predict(w: &SurrogateWeights, crop: &Anatomy, params: &SurrogateParams) -> Result<ScalarField3D> {
    let norm = w.ranges().normalize(params)?;
    let out = predict_activation(w, &anatomy_to_activation(crop)?, norm)?;
    ScalarField3D::new(crop.dims(), crop.spacing_mm(), out.into_data().into_iter().map(f64::from).collect())
}
