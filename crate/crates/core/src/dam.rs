//! Density-aware masks: Gaussian density maps from ground-truth boxes, pooled
//! to the token grid and refined with CNN features.

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::Mode;

/// Gaussian support radius in units of σ.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

/// Per-pixel density over an `height × width` image.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `(1, H, W)` tensor view of the map.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("consistent map")
    }
}

/// Mask on the `(H/P) × (W/P)` token grid, row-major in patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
}

/// Refined, clipped mask consumed by the DEFM at `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMask {
    pub level: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
}

/// Isotropic spread from the box extent: the geometric-mean side over six,
/// so that 3σ is about half the box.
pub fn sigma_from_box(b: &RotatedBox) -> f64 {
    (b.w * b.h).sqrt() / 6.0
}

pub fn gaussian_contribution(b: &RotatedBox, x: f64, y: f64) -> f64 {
    let s = sigma_from_box(b);
    let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
    (-d2 / (2.0 * s * s)).exp()
}

/// Sum of per-box Gaussians evaluated at integer pixel centers `(x, y)`.
/// Each kernel is truncated to the disk of radius [`TRUNCATION_SIGMAS`]·σ.
pub fn coarse_density_map(boxes: &[RotatedBox], height: usize, width: usize) -> DensityMap {
    let mut map = DensityMap::zeros(height, width);
    for b in boxes {
        let s = sigma_from_box(b);
        let r = TRUNCATION_SIGMAS * s;
        let r2 = r * r;
        let inv = 1.0 / (2.0 * s * s);
        let x0 = (b.cx - r).ceil().max(0.0) as usize;
        let y0 = (b.cy - r).ceil().max(0.0) as usize;
        let x1 = (b.cx + r).floor().min(width as f64 - 1.0);
        let y1 = (b.cy + r).floor().min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            let dy2 = (y as f64 - b.cy).powi(2);
            for x in x0..=x1 as usize {
                let d2 = (x as f64 - b.cx).powi(2) + dy2;
                if d2 <= r2 {
                    map.values[y * width + x] += (-d2 * inv).exp();
                }
            }
        }
    }
    map
}

/// Average-pools a pixel map over `patch × patch` windows onto the token grid.
pub fn pool_mask_to_tokens(map: &DensityMap, patch: usize) -> Result<TokenMask> {
    if patch == 0 || !map.height.is_multiple_of(patch) || !map.width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "map {}x{} is not divisible by patch size {patch}",
            map.height, map.width
        )));
    }
    let (gh, gw) = (map.height / patch, map.width / patch);
    let mut values = vec![0.0; gh * gw];
    let scale = 1.0 / (patch * patch) as f64;
    for y in 0..map.height {
        for x in 0..map.width {
            values[(y / patch) * gw + x / patch] += map.values[y * map.width + x] * scale;
        }
    }
    Ok(TokenMask {
        grid_h: gh,
        grid_w: gw,
        values,
    })
}

/// 1×1 refinement convolutions for one DEFM level.
#[derive(Debug, Clone, Copy)]
pub struct RefineParams {
    pub level: usize,
    /// `(1, 2, 1, 1)`: pooled density and pooled features → mask (training).
    pub train_w: ParamId,
    pub train_b: ParamId,
    /// `(1, 1, 1, 1)`: pooled features → mask (inference).
    pub infer_w: ParamId,
    pub infer_b: ParamId,
}

impl RefineParams {
    /// Initialized to average its inputs (0.5/0.5 in training, identity at inference).
    pub fn new(store: &mut ParamStore, level: usize) -> Self {
        let p = format!("refine.{level}");
        RefineParams {
            level,
            train_w: store.add(format!("{p}.train.weight"), Tensor::full(&[1, 2, 1, 1], 0.5), true),
            train_b: store.add(format!("{p}.train.bias"), Tensor::zeros(&[1]), false),
            infer_w: store.add(format!("{p}.infer.weight"), Tensor::ones(&[1, 1, 1, 1]), true),
            infer_b: store.add(format!("{p}.infer.bias"), Tensor::zeros(&[1]), false),
        }
    }
}

/// Averages `feature: (B, C, h, w)` over channels and onto a `grid_h × grid_w` grid.
pub fn pool_features_to_grid(g: &mut Graph, feature: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    let s = g.shape(feature).to_vec();
    if s.len() != 4 || !s[2].is_multiple_of(grid_h) || !s[3].is_multiple_of(grid_w) || s[2] / grid_h != s[3] / grid_w {
        return Err(TensorError::invalid(
            "refine_mask",
            format!("feature extents {s:?} do not pool onto a {grid_h}x{grid_w} token grid"),
        )
        .into());
    }
    let k = s[2] / grid_h;
    let pooled = if k == 1 { feature } else { g.avg_pool2d(feature, k)? };
    Ok(g.mean_axis(pooled, 1, true)?)
}

/// Refined token mask `(B, N)` on the `grid` token grid, clipped to `[0, 1]`.
///
/// Training consumes the ground-truth `coarse` map `(B, 1, H, W)`; inference
/// reads only the CNN `feature` and never touches `coarse`.
pub fn refine_mask_graph(
    g: &mut Graph,
    b: &Bindings,
    p: &RefineParams,
    coarse: Option<Var>,
    feature: Var,
    grid: (usize, usize),
    mode: Mode,
) -> Result<Var> {
    let batch = g.shape(feature)[0];
    let (gh, gw) = grid;
    let pf = pool_features_to_grid(g, feature, gh, gw)?;
    let out = match mode {
        Mode::Training => {
            let m = coarse.ok_or_else(|| Error::Config("training-mode mask refinement needs a density map".into()))?;
            let ms = g.shape(m).to_vec();
            if ms.len() != 4
                || ms[0] != batch
                || ms[1] != 1
                || !ms[2].is_multiple_of(gh)
                || !ms[3].is_multiple_of(gw)
                || ms[2] / gh != ms[3] / gw
            {
                return Err(TensorError::invalid(
                    "refine_mask",
                    format!("density map {ms:?} does not tile onto a {gh}x{gw} token grid"),
                )
                .into());
            }
            let patch = ms[2] / gh;
            let pm = if patch == 1 { m } else { g.avg_pool2d(m, patch)? };
            let both = g.concat(&[pm, pf], 1)?;
            g.conv2d(both, b[p.train_w], Some(b[p.train_b]), 1, 0)?
        }
        Mode::Inferring => g.conv2d(pf, b[p.infer_w], Some(b[p.infer_b]), 1, 0)?,
    };
    let clipped = g.clip(out, 0.0, 1.0);
    Ok(g.reshape(clipped, &[batch, gh * gw])?)
}

/// Eager form of [`refine_mask_graph`] for a single image.
pub fn refine_mask(
    store: &ParamStore,
    p: &RefineParams,
    coarse: &DensityMap,
    feature: &Tensor,
    grid: (usize, usize),
    mode: Mode,
) -> Result<RefinedMask> {
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let m = g.constant(Tensor::new(
        vec![1, 1, coarse.height, coarse.width],
        coarse.values.clone(),
    )?);
    let f = g.constant(feature.clone());
    let out = refine_mask_graph(&mut g, &b, p, Some(m), f, grid, mode)?;
    Ok(RefinedMask {
        level: p.level,
        grid_h: grid.0,
        grid_w: grid.1,
        values: g.value(out).data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, 0.3, 0).unwrap()
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_from_box(&bx(0.0, 0.0, 6.0, 6.0)), 1.0);
        assert_eq!(sigma_from_box(&bx(0.0, 0.0, 12.0, 3.0)), 1.0);
        let tiny = sigma_from_box(&bx(0.0, 0.0, 1e-9, 1e-9));
        assert!(tiny > 0.0 && tiny < 1e-9);
    }

    #[test]
    fn gaussian_examples() {
        let b = bx(4.0, 5.0, 6.0, 6.0);
        assert_eq!(gaussian_contribution(&b, 4.0, 5.0), 1.0);
        assert!((gaussian_contribution(&b, 5.0, 5.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_contribution(&b, 4.0, 8.0) - 0.011108996538242306).abs() < 1e-15);
    }

    #[test]
    fn coarse_map_examples() {
        assert!(coarse_density_map(&[], 8, 8).values.iter().all(|&v| v == 0.0));
        let b = bx(3.0, 4.0, 6.0, 6.0);
        let one = coarse_density_map(&[b], 8, 8);
        assert_eq!(one.max(), 1.0);
        assert_eq!(one.get(3, 4), 1.0);
        let two = coarse_density_map(&[b, b], 8, 8);
        assert_eq!(two.max(), 2.0);
    }

    #[test]
    fn pooling_examples() {
        let uniform = DensityMap {
            height: 4,
            width: 4,
            values: vec![0.3; 16],
        };
        let t = pool_mask_to_tokens(&uniform, 2).unwrap();
        assert_eq!((t.grid_h, t.grid_w), (2, 2));
        assert!(t.values.iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let mut spike = DensityMap::zeros(4, 4);
        spike.values[2 * 4 + 3] = 1.0; // pixel (x=3, y=2) lies in token (1, 1)
        let t = pool_mask_to_tokens(&spike, 2).unwrap();
        assert_eq!(t.values, vec![0.0, 0.0, 0.0, 0.25]);

        assert!(pool_mask_to_tokens(&DensityMap::zeros(5, 4), 2).is_err());
    }
}
