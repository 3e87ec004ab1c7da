//! Transformer backbone: patch embedding, attention blocks, density-gated
//! token focusing at the configured layers, and token–CNN fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::DEFAULT_CHANNELS;
use crate::defm::{defm_forward, DefmParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_conv, normal, xavier, Bindings, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::Mode;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Encoder layers preceded by a DEFM, strictly increasing.
    pub defm_layers: Vec<usize>,
    pub mlp_ratio: usize,
    pub cnn_channels: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// 512×512 input, 16×16 patches, 8 heads, depth 12.
    pub fn full() -> Self {
        ModelConfig {
            image_h: 512,
            image_w: 512,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 8,
            defm_layers: vec![3, 6, 9],
            mlp_ratio: 4,
            cnn_channels: DEFAULT_CHANNELS,
        }
    }

    /// Desk-scale model for 64×64 synthetic scenes.
    pub fn toy() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            patch_size: 8,
            embed_dim: 32,
            depth: 4,
            num_heads: 4,
            defm_layers: vec![1, 3],
            mlp_ratio: 2,
            cnn_channels: DEFAULT_CHANNELS,
        }
    }

    /// Smallest configuration that exercises every module.
    pub fn tiny() -> Self {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            defm_layers: vec![1],
            mlp_ratio: 2,
            cnn_channels: [2, 2, 2, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let p = self.patch_size;
        if !matches!(p, 2 | 4 | 8 | 16) {
            return fail(format!("patch size {p} must be one of 2, 4, 8, 16"));
        }
        if self.image_h == 0
            || self.image_w == 0
            || !self.image_h.is_multiple_of(16)
            || !self.image_w.is_multiple_of(16)
        {
            return fail(format!(
                "image {}x{} must be a nonzero multiple of 16",
                self.image_h, self.image_w
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return fail(format!("embed_dim {} must be even", self.embed_dim));
        }
        if self.mlp_ratio == 0 || self.depth == 0 || self.cnn_channels.contains(&0) {
            return fail("depth, mlp_ratio and CNN channels must be positive".into());
        }
        if let Some(&l) = self.defm_layers.iter().find(|&&l| l >= self.depth) {
            return fail(format!("DEFM layer {l} outside depth {}", self.depth));
        }
        if self.defm_layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "DEFM layers {:?} must be strictly increasing",
                self.defm_layers
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// CNN level whose extents equal the token grid.
    pub fn fuse_level(&self) -> usize {
        self.patch_size.trailing_zeros() as usize - 1
    }

    /// CNN level refining the mask of the `k`-th DEFM.
    pub fn mask_level(&self, k: usize) -> usize {
        k.min(self.fuse_level())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl BlockParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, i: usize, d: usize, hidden: usize) -> Self {
        let p = format!("vit.block.{i}");
        BlockParams {
            wq: store.add(format!("{p}.attn.q"), xavier(rng, d, d), true),
            wk: store.add(format!("{p}.attn.k"), xavier(rng, d, d), true),
            wv: store.add(format!("{p}.attn.v"), xavier(rng, d, d), true),
            wo: store.add(format!("{p}.attn.out.weight"), xavier(rng, d, d), true),
            bo: store.add(format!("{p}.attn.out.bias"), Tensor::zeros(&[d]), false),
            ln1_g: store.add(format!("{p}.ln1.gamma"), Tensor::ones(&[d]), false),
            ln1_b: store.add(format!("{p}.ln1.beta"), Tensor::zeros(&[d]), false),
            ff1_w: store.add(format!("{p}.ffn.0.weight"), xavier(rng, d, hidden), true),
            ff1_b: store.add(format!("{p}.ffn.0.bias"), Tensor::zeros(&[hidden]), false),
            ff2_w: store.add(format!("{p}.ffn.1.weight"), xavier(rng, hidden, d), true),
            ff2_b: store.add(format!("{p}.ffn.1.bias"), Tensor::zeros(&[d]), false),
            ln2_g: store.add(format!("{p}.ln2.gamma"), Tensor::ones(&[d]), false),
            ln2_b: store.add(format!("{p}.ln2.beta"), Tensor::zeros(&[d]), false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VitParams {
    pub proj: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl VitParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let (p, d) = (cfg.patch_size, cfg.embed_dim);
        let proj = store.add("vit.patch_proj", xavier(rng, p * p, d), true);
        let pos = store.add("vit.pos_embed", normal(rng, &[cfg.num_tokens(), d], 0.02), false);
        let blocks = (0..cfg.depth)
            .map(|i| BlockParams::new(store, rng, i, d, cfg.mlp_ratio * d))
            .collect();
        VitParams { proj, pos, blocks }
    }
}

/// `(B, 1, H, W)` → `(B, N, P²)`; patches and pixels within a patch are row-major.
pub fn patchify(g: &mut Graph, image: Var, patch: usize) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[1] != 1 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(TensorError::invalid(
            "patchify",
            format!("image {s:?} does not split into {patch}x{patch} patches"),
        )
        .into());
    }
    let (b, gh, gw) = (s[0], s[2] / patch, s[3] / patch);
    let x = g.reshape(image, &[b, gh, patch, gw, patch])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    Ok(g.reshape(x, &[b, gh * gw, patch * patch])?)
}

/// Inverse of [`patchify`] on plain tensors.
pub fn unpatchify(patches: &Tensor, grid: (usize, usize), patch: usize) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 3 || s[1] != grid.0 * grid.1 || s[2] != patch * patch {
        return Err(TensorError::invalid(
            "unpatchify",
            format!(
                "patches {s:?} do not form a {}x{} grid of {patch}x{patch}",
                grid.0, grid.1
            ),
        )
        .into());
    }
    let (h, w) = (grid.0 * patch, grid.1 * patch);
    let mut out = Tensor::zeros(&[s[0], 1, h, w]);
    let src = patches.data();
    let dst = out.data_mut();
    for bi in 0..s[0] {
        for y in 0..h {
            for x in 0..w {
                let tok = (y / patch) * grid.1 + x / patch;
                let k = (y % patch) * patch + x % patch;
                dst[(bi * h + y) * w + x] = src[(bi * s[1] + tok) * s[2] + k];
            }
        }
    }
    Ok(out)
}

/// `patches · W_proj + PE`, with PE `(N, D)` broadcast over the batch.
pub fn embed(g: &mut Graph, patches: Var, proj: Var, pos: Var) -> Result<Var> {
    let z = g.matmul(patches, proj)?;
    let (zs, ps) = (g.shape(z).to_vec(), g.shape(pos).to_vec());
    if ps.len() != 2 || ps[..] != zs[1..] {
        return Err(TensorError::mismatch("embed", &zs, &ps).into());
    }
    Ok(g.add(z, pos)?)
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(g.permute(x, &[0, 2, 1, 3])?)
}

/// Multi-head self-attention before the residual: returns the projected
/// output `(B, N, D)` and the attention probabilities `(B, heads, N, N)`.
pub fn multi_head_attention(g: &mut Graph, b: &Bindings, p: &BlockParams, z: Var, heads: usize) -> Result<(Var, Var)> {
    let s = g.shape(z).to_vec();
    if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(TensorError::invalid(
            "attention_block",
            format!("tokens {s:?} incompatible with {heads} heads"),
        )
        .into());
    }
    let q = g.matmul(z, b[p.wq])?;
    let k = g.matmul(z, b[p.wk])?;
    let v = g.matmul(z, b[p.wv])?;
    let (q, k, v) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.mul_scalar(scores, 1.0 / ((s[2] / heads) as f64).sqrt());
    let probs = g.softmax(scores);
    let o = g.matmul(probs, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &s)?;
    let o = g.matmul(o, b[p.wo])?;
    Ok((g.add(o, b[p.bo])?, probs))
}

/// One encoder layer: attention with residual, then `LN(FFN(LN(Z')) + Z')`.
pub fn attention_block(g: &mut Graph, b: &Bindings, p: &BlockParams, z: Var, heads: usize) -> Result<Var> {
    let (attn, _) = multi_head_attention(g, b, p, z, heads)?;
    let z1 = g.add(attn, z)?;
    let h = g.layer_norm(z1, b[p.ln1_g], b[p.ln1_b], LN_EPS)?;
    let h = g.matmul(h, b[p.ff1_w])?;
    let h = g.add(h, b[p.ff1_b])?;
    let h = g.gelu(h);
    let h = g.matmul(h, b[p.ff2_w])?;
    let h = g.add(h, b[p.ff2_b])?;
    let h = g.add(h, z1)?;
    Ok(g.layer_norm(h, b[p.ln2_g], b[p.ln2_b], LN_EPS)?)
}

/// Scales each token by the keep channel (index 0) of `o_hat: (B, N, 2)`.
pub fn apply_focus(g: &mut Graph, z: Var, o_hat: Var) -> Result<Var> {
    let keep = g.slice(o_hat, 2, 0, 1)?;
    Ok(g.mul(z, keep)?)
}

/// Output of one DEFM stage.
#[derive(Debug, Clone, Copy)]
pub struct FocusOutput {
    /// Index into the configured DEFM layer list.
    pub level: usize,
    /// `Ô`: `(B, N, 2)` probabilities, channel 0 = keep.
    pub probs: Var,
    /// Pre-softmax scores for the auxiliary loss.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(B, N, D)`; with hard token dropping, dropped positions are zero.
    pub tokens: Var,
    pub focus: Vec<FocusOutput>,
}

/// Runs the encoder over `image: (B, 1, H, W)`. `masks` holds one refined
/// token mask `(B, N)` per DEFM layer. `keep_ratio` enables hard top-k token
/// dropping after each DEFM (inference with `B = 1` only).
#[allow(clippy::too_many_arguments)]
pub fn encode(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    vit: &VitParams,
    defm: &[DefmParams],
    image: Var,
    masks: &[Var],
    mode: Mode,
    keep_ratio: Option<f64>,
) -> Result<EncoderOutput> {
    if masks.len() != cfg.defm_layers.len() || defm.len() != cfg.defm_layers.len() {
        return Err(Error::Config(format!(
            "expected {} DEFM masks, got {}",
            cfg.defm_layers.len(),
            masks.len()
        )));
    }
    let batch = g.shape(image)[0];
    if let Some(r) = keep_ratio {
        if mode == Mode::Training || batch != 1 || !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!(
                "hard token dropping needs inference, batch 1 and a ratio in (0, 1], got {mode:?}, {batch}, {r}"
            )));
        }
    }
    let patches = patchify(g, image, cfg.patch_size)?;
    let mut z = embed(g, patches, b[vit.proj], b[vit.pos])?;
    let mut active: Vec<usize> = (0..cfg.num_tokens()).collect();
    let mut focus = Vec::with_capacity(masks.len());
    let mut next = 0;
    for (i, bp) in vit.blocks.iter().enumerate() {
        if cfg.defm_layers.get(next) == Some(&i) {
            let mut mask = masks[next];
            if active.len() != cfg.num_tokens() {
                mask = g.index_select(mask, 1, &active)?;
            }
            let out = defm_forward(g, b, &defm[next], z, mask, mode)?;
            z = out.tokens;
            focus.push(FocusOutput {
                level: next,
                probs: out.probs,
                logits: out.logits,
            });
            if let Some(r) = keep_ratio {
                let keep = top_k_tokens(g.value(out.probs), r);
                z = g.index_select(z, 1, &keep)?;
                active = keep.iter().map(|&k| active[k]).collect();
            }
            next += 1;
        }
        z = attention_block(g, b, bp, z, cfg.num_heads)?;
    }
    if active.len() != cfg.num_tokens() {
        z = scatter_tokens(g, z, &active, cfg.num_tokens())?;
    }
    Ok(EncoderOutput { tokens: z, focus })
}

/// Positions of the `ceil(r·n)` highest keep probabilities, ascending.
fn top_k_tokens(probs: &Tensor, ratio: f64) -> Vec<usize> {
    let n = probs.shape()[1];
    let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let keep = |i: usize| probs.data()[2 * i];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| keep(j).total_cmp(&keep(i)).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Places active tokens back at their grid positions, zero elsewhere.
fn scatter_tokens(g: &mut Graph, z: Var, active: &[usize], n: usize) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let zero = g.constant(Tensor::zeros(&[s[0], 1, s[2]]));
    let padded = g.concat(&[z, zero], 1)?;
    let mut idx = vec![active.len(); n];
    for (j, &a) in active.iter().enumerate() {
        idx[a] = j;
    }
    Ok(g.index_select(padded, 1, &idx)?)
}

/// Encoder without any DEFM code path.
pub fn plain_encode(g: &mut Graph, b: &Bindings, cfg: &ModelConfig, vit: &VitParams, image: Var) -> Result<Var> {
    let patches = patchify(g, image, cfg.patch_size)?;
    let mut z = embed(g, patches, b[vit.proj], b[vit.pos])?;
    for bp in &vit.blocks {
        z = attention_block(g, b, bp, z, cfg.num_heads)?;
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy)]
pub struct FuseParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl FuseParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize, c: usize) -> Self {
        FuseParams {
            w: store.add("fuse.weight", he_conv(rng, d, d + c, 1), true),
            b: store.add("fuse.bias", Tensor::zeros(&[d]), false),
        }
    }
}

/// `(B, N, D)` tokens → `(B, D, gh, gw)` map in row-major patch order.
pub fn tokens_to_map(g: &mut Graph, z: Var, grid: (usize, usize)) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(TensorError::invalid(
            "fuse_final",
            format!("tokens {s:?} do not fill a {}x{} grid", grid.0, grid.1),
        )
        .into());
    }
    let t = g.permute(z, &[0, 2, 1])?;
    Ok(g.reshape(t, &[s[0], s[2], grid.0, grid.1])?)
}

/// Concatenates the token map with the matching CNN level and mixes back
/// to `D` channels with a 1×1 convolution.
pub fn fuse_final(
    g: &mut Graph,
    b: &Bindings,
    p: &FuseParams,
    z: Var,
    f_match: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let fs = g.shape(f_match).to_vec();
    if fs.len() != 4 || fs[2] != grid.0 || fs[3] != grid.1 {
        return Err(TensorError::invalid(
            "fuse_final",
            format!("CNN level {fs:?} does not match the {}x{} token grid", grid.0, grid.1),
        )
        .into());
    }
    let map = tokens_to_map(g, z, grid)?;
    let cat = g.concat(&[map, f_match], 1)?;
    Ok(g.conv2d(cat, b[p.w], Some(b[p.b]), 1, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        for c in [ModelConfig::full(), ModelConfig::toy(), ModelConfig::tiny()] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::full().grid(), (32, 32));
        assert_eq!(ModelConfig::full().fuse_level(), 3);
        assert_eq!(ModelConfig::toy().fuse_level(), 2);
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::toy();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.num_heads = 3));
        assert!(bad(|c| c.defm_layers = vec![4]));
        assert!(bad(|c| c.defm_layers = vec![2, 1]));
        assert!(bad(|c| c.patch_size = 6));
        assert!(bad(|c| c.image_h = 40));
    }

    #[test]
    fn patchify_top_left_block() {
        let img = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let mut g = Graph::inference();
        let x = g.constant(img);
        let p = patchify(&mut g, x, 2).unwrap();
        let v = g.value(p);
        assert_eq!(v.shape(), &[1, 4, 4]);
        assert_eq!(&v.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&v.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn top_k_prefers_high_keep_then_low_index() {
        let probs = Tensor::new(vec![1, 4, 2], vec![0.2, 0.8, 0.9, 0.1, 0.2, 0.8, 0.7, 0.3]).unwrap();
        assert_eq!(top_k_tokens(&probs, 0.5), vec![1, 3]);
        assert_eq!(top_k_tokens(&probs, 0.75), vec![0, 1, 3]);
    }
}
