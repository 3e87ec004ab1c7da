//! Four-stage convolutional feature pyramid.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{he_conv, Bindings, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, Copy)]
pub struct StageParams {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct CnnParams {
    pub channels: [usize; 4],
    pub stages: [StageParams; 4],
}

impl CnnParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, channels: [usize; 4]) -> Self {
        let mut in_c = 1;
        let stages = std::array::from_fn(|i| {
            let c = channels[i];
            let p = format!("cnn.{i}");
            let s = StageParams {
                down_w: store.add(format!("{p}.down.weight"), he_conv(rng, c, in_c, 3), true),
                down_b: store.add(format!("{p}.down.bias"), Tensor::zeros(&[c]), false),
                conv_w: store.add(format!("{p}.conv.weight"), he_conv(rng, c, c, 3), true),
                conv_b: store.add(format!("{p}.conv.bias"), Tensor::zeros(&[c]), false),
            };
            in_c = c;
            s
        });
        CnnParams { channels, stages }
    }
}

/// `F_1..F_4` with shapes `(B, C_i, H/2^i, W/2^i)`.
#[derive(Debug, Clone, Copy)]
pub struct PyramidFeatures {
    pub levels: [Var; 4],
}

pub fn stage_forward(g: &mut Graph, b: &Bindings, s: &StageParams, x: Var) -> Result<Var> {
    let y = g.conv2d(x, b[s.down_w], Some(b[s.down_b]), 2, 1)?;
    let y = g.gelu(y);
    let y = g.conv2d(y, b[s.conv_w], Some(b[s.conv_b]), 1, 1)?;
    Ok(g.gelu(y))
}

pub fn cnn_forward(g: &mut Graph, b: &Bindings, p: &CnnParams, image: Var) -> Result<PyramidFeatures> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) {
        return Err(TensorError::invalid(
            "cnn_forward",
            format!("image {s:?} must be (B, 1, H, W) with H and W divisible by 16"),
        )
        .into());
    }
    let mut x = image;
    let mut levels = [image; 4];
    for (i, st) in p.stages.iter().enumerate() {
        x = stage_forward(g, b, st, x)?;
        levels[i] = x;
    }
    Ok(PyramidFeatures { levels })
}
