//! Density-enhanced fusion: mask-weighted global pooling fused with local
//! channels, producing a per-token focusing probability.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{xavier, Bindings, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::vit::{apply_focus, LN_EPS};
use crate::Mode;

/// Added to the pooling denominator where the mask sums to zero.
pub const POOL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct DefmParams {
    pub level: usize,
    pub pre_g: ParamId,
    pub pre_b: ParamId,
    pub out_g: ParamId,
    pub out_b: ParamId,
    /// `(C, C/2)`
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    /// `(C/2, 2)`
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl DefmParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, level: usize, c: usize) -> Self {
        let p = format!("defm.{level}");
        let h = c / 2;
        DefmParams {
            level,
            pre_g: store.add(format!("{p}.pre_ln.gamma"), Tensor::ones(&[c]), false),
            pre_b: store.add(format!("{p}.pre_ln.beta"), Tensor::zeros(&[c]), false),
            out_g: store.add(format!("{p}.out_ln.gamma"), Tensor::ones(&[c]), false),
            out_b: store.add(format!("{p}.out_ln.beta"), Tensor::zeros(&[c]), false),
            fc1_w: store.add(format!("{p}.mlp.0.weight"), xavier(rng, c, h), true),
            fc1_b: store.add(format!("{p}.mlp.0.bias"), Tensor::zeros(&[h]), false),
            fc2_w: store.add(format!("{p}.mlp.1.weight"), xavier(rng, h, 2), true),
            fc2_b: store.add(format!("{p}.mlp.1.bias"), Tensor::zeros(&[2]), false),
        }
    }
}

/// First half of the channels is local, second half global.
pub fn channel_split(g: &mut Graph, z: Var) -> Result<(Var, Var)> {
    let s = g.shape(z).to_vec();
    let c = *s.last().unwrap_or(&0);
    if s.len() != 3 || !c.is_multiple_of(2) {
        return Err(TensorError::invalid("channel_split", format!("tokens {s:?} need an even channel count")).into());
    }
    Ok(g.split(z, 2, c / 2)?)
}

/// `(B, N)` → `(B, N, c_half)`.
pub fn broadcast_mask(g: &mut Graph, mask: Var, c_half: usize) -> Result<Var> {
    let s = g.shape(mask).to_vec();
    if s.len() != 2 {
        return Err(TensorError::invalid("broadcast_mask", format!("mask {s:?} must be (B, N)")).into());
    }
    let m = g.reshape(mask, &[s[0], s[1], 1])?;
    Ok(g.broadcast_to(m, &[s[0], s[1], c_half])?)
}

/// Per-channel weighted mean over tokens: `Σ Z·P / Σ P` → `(B, C/2)`.
pub fn masked_global_pool(g: &mut Graph, glob: Var, p: Var) -> Result<Var> {
    let weighted = g.mul(glob, p)?;
    let num = g.sum_axis(weighted, 1, false)?;
    let den = g.sum_axis(p, 1, false)?;
    let guard = g
        .value(den)
        .data()
        .iter()
        .map(|&d| if d == 0.0 { POOL_EPS } else { 0.0 })
        .collect();
    let guard = g.constant(Tensor::new(g.shape(den).to_vec(), guard)?);
    let den = g.add(den, guard)?;
    Ok(g.div(num, den)?)
}

/// Appends the pooled vector `g_vec: (B, C/2)` to every local token.
pub fn fuse(g: &mut Graph, loc: Var, g_vec: Var) -> Result<Var> {
    let (ls, gs) = (g.shape(loc).to_vec(), g.shape(g_vec).to_vec());
    if ls.len() != 3 || gs.len() != 2 || gs[0] != ls[0] {
        return Err(TensorError::mismatch("fuse", &ls, &gs).into());
    }
    let gv = g.reshape(g_vec, &[gs[0], 1, gs[1]])?;
    let gv = g.broadcast_to(gv, &[ls[0], ls[1], gs[1]])?;
    Ok(g.concat(&[loc, gv], 2)?)
}

/// Multiplies every channel by the token mask during training; identity otherwise.
pub fn train_modulate(g: &mut Graph, z: Var, mask: Var, mode: Mode) -> Result<Var> {
    match mode {
        Mode::Inferring => Ok(z),
        Mode::Training => {
            let s = g.shape(mask).to_vec();
            let m = g.reshape(mask, &[s[0], s[1], 1])?;
            Ok(g.mul(z, m)?)
        }
    }
}

/// `(probabilities, logits)`, both `(B, N, 2)`.
pub fn focusing_probability(g: &mut Graph, b: &Bindings, p: &DefmParams, z: Var) -> Result<(Var, Var)> {
    let h = g.layer_norm(z, b[p.out_g], b[p.out_b], LN_EPS)?;
    let h = g.matmul(h, b[p.fc1_w])?;
    let h = g.add(h, b[p.fc1_b])?;
    let h = g.gelu(h);
    let h = g.matmul(h, b[p.fc2_w])?;
    let logits = g.add(h, b[p.fc2_b])?;
    Ok((g.softmax(logits), logits))
}

#[derive(Debug, Clone, Copy)]
pub struct DefmOutput {
    pub probs: Var,
    pub logits: Var,
    /// Mask-pooled global vector `(B, C/2)`.
    pub global: Var,
    /// Input tokens gated by the keep probability.
    pub tokens: Var,
}

pub fn defm_forward(g: &mut Graph, b: &Bindings, p: &DefmParams, z: Var, mask: Var, mode: Mode) -> Result<DefmOutput> {
    let (zs, ms) = (g.shape(z).to_vec(), g.shape(mask).to_vec());
    if zs.len() != 3 || ms != zs[..2] {
        return Err(TensorError::invalid(
            "defm_forward",
            format!("mask {ms:?} does not match the token grid of {zs:?}"),
        )
        .into());
    }
    let h = g.layer_norm(z, b[p.pre_g], b[p.pre_b], LN_EPS)?;
    let h = g.gelu(h);
    let (loc, glob) = channel_split(g, h)?;
    let pm = broadcast_mask(g, mask, zs[2] / 2)?;
    let global = masked_global_pool(g, glob, pm)?;
    let fused = fuse(g, loc, global)?;
    let modulated = train_modulate(g, fused, mask, mode)?;
    let (probs, logits) = focusing_probability(g, b, p, modulated)?;
    let tokens = apply_focus(g, z, probs)?;
    Ok(DefmOutput {
        probs,
        logits,
        global,
        tokens,
    })
}
