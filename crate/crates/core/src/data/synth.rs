use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `(1, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<RotatedBox>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Inclusive `[min, max]` ranges throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub num_clusters: (usize, usize),
    pub targets_per_cluster: (usize, usize),
    /// Long side of a target, pixels.
    pub target_length: (f64, f64),
    /// Short side of a target, pixels.
    pub target_width: (f64, f64),
    /// Maximum distance of a target center from its cluster center.
    pub cluster_radius: f64,
    pub speckle_looks: u32,
    pub clutter_blob_count: usize,
    pub background_mean: f64,
    /// Target brightness relative to the background mean.
    pub target_contrast: (f64, f64),
    /// Targets are kept in distinct cells of this size so each grid cell
    /// holds at most one center.
    pub cell_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_h: 64,
            image_w: 64,
            num_clusters: (1, 3),
            targets_per_cluster: (2, 5),
            target_length: (10.0, 16.0),
            target_width: (5.0, 8.0),
            cluster_radius: 12.0,
            speckle_looks: 4,
            clutter_blob_count: 3,
            background_mean: 0.1,
            target_contrast: (3.0, 6.0),
            cell_size: 8,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.image_h < 16 || self.image_w < 16 {
            return bad("image must be at least 16x16");
        }
        if self.num_clusters.0 > self.num_clusters.1 || self.targets_per_cluster.0 > self.targets_per_cluster.1 {
            return bad("ranges must satisfy min <= max");
        }
        let ok_range = |r: (f64, f64)| r.0 >= 2.0 && r.0 <= r.1 && r.1.is_finite();
        if !ok_range(self.target_length) || !ok_range(self.target_width) {
            return bad("target extents must be at least 2 pixels with min <= max");
        }
        if self.target_length.1 >= self.image_h.min(self.image_w) as f64 / 2.0 {
            return bad("targets must be smaller than half the image");
        }
        if self.speckle_looks == 0 {
            return bad("speckle_looks must be positive");
        }
        if !(self.background_mean > 0.0 && self.background_mean * self.target_contrast.1 <= 1.0) {
            return bad("background_mean times contrast must lie in (0, 1]");
        }
        if self.target_contrast.0 <= 0.0 || self.target_contrast.0 > self.target_contrast.1 {
            return bad("target_contrast must be positive with min <= max");
        }
        if self.cell_size == 0 || self.cluster_radius.is_nan() || self.cluster_radius < 0.0 {
            return bad("cell_size must be positive and cluster_radius nonnegative");
        }
        Ok(())
    }
}

const SUPERSAMPLE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 40;

fn inside(b: &RotatedBox, h: usize, w: usize) -> bool {
    let (x0, y0, x1, y1) = b.bounds();
    x0 >= 0.5 && y0 >= 0.5 && x1 <= w as f64 - 1.5 && y1 <= h as f64 - 1.5
}

fn place_targets(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<RotatedBox> {
    let (h, w) = (cfg.image_h, cfg.image_w);
    let cell = |b: &RotatedBox| {
        (
            (b.cy / cfg.cell_size as f64) as usize,
            (b.cx / cfg.cell_size as f64) as usize,
        )
    };
    let mut boxes: Vec<RotatedBox> = Vec::new();
    let clusters = rng.random_range(cfg.num_clusters.0..=cfg.num_clusters.1);
    let margin = cfg.target_length.1 / 2.0 + 1.5;
    for _ in 0..clusters {
        let ccx = rng.random_range(margin..w as f64 - margin);
        let ccy = rng.random_range(margin..h as f64 - margin);
        let heading = rng.random_range(-PI / 2.0..PI / 2.0);
        let n = rng.random_range(cfg.targets_per_cluster.0..=cfg.targets_per_cluster.1);
        for _ in 0..n {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let r = cfg.cluster_radius * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..2.0 * PI);
                let len = rng.random_range(cfg.target_length.0..=cfg.target_length.1);
                let wid = rng.random_range(cfg.target_width.0..=cfg.target_width.1.min(len));
                // targets in a cluster share a rough heading, as moored ships do
                let theta = heading + rng.random_range(-0.3..0.3);
                let Ok(b) = RotatedBox::new(ccx + r * a.cos(), ccy + r * a.sin(), len, wid, theta, 0) else {
                    continue;
                };
                let fits = inside(&b, h, w)
                    && boxes.iter().all(|o| {
                        cell(o) != cell(&b)
                            && rotated_iou(o, &b) == 0.0
                            && rotated_iou(&o.with_grown(1.0), &b.with_grown(1.0)) == 0.0
                    });
                if fits {
                    boxes.push(b);
                    break;
                }
            }
        }
    }
    boxes
}

trait Grow {
    fn with_grown(&self, by: f64) -> Self;
}

impl Grow for RotatedBox {
    fn with_grown(&self, by: f64) -> Self {
        RotatedBox {
            w: self.w + by,
            h: self.h + by,
            ..*self
        }
    }
}

/// Generates scene `index` of the dataset defined by `cfg`. Deterministic in
/// `(cfg.seed, index)`.
pub fn synth_scene(cfg: &SynthConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (h, w) = (cfg.image_h, cfg.image_w);
    let boxes = place_targets(cfg, &mut rng);

    let bg = cfg.background_mean;
    let mut clean = vec![bg; h * w];
    // dim clutter blobs that are brighter than the background but rounder
    // and fainter than targets
    for _ in 0..cfg.clutter_blob_count {
        let (bx, by) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let s = rng.random_range(1.5..3.5);
        let amp = bg * rng.random_range(0.8..1.8);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                clean[y * w + x] += amp * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    let step = 1.0 / SUPERSAMPLE as f64;
    for b in &boxes {
        let peak = bg * rng.random_range(cfg.target_contrast.0..=cfg.target_contrast.1);
        // brightness ramps along the long axis, from stern to bow
        let ramp = rng.random_range(0.6..0.9);
        let (s, c) = b.theta.sin_cos();
        let (x0, y0, x1, y1) = b.bounds();
        for y in (y0.floor().max(0.0) as usize)..=(y1.ceil() as usize).min(h - 1) {
            for x in (x0.floor().max(0.0) as usize)..=(x1.ceil() as usize).min(w - 1) {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                        let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                        if b.contains(px, py) {
                            let u = ((px - b.cx) * c + (py - b.cy) * s) / b.w + 0.5;
                            acc += peak * (ramp + (1.0 - ramp) * u.clamp(0.0, 1.0)) - bg;
                        }
                    }
                }
                clean[y * w + x] += acc * step * step;
            }
        }
    }
    let looks = cfg.speckle_looks as f64;
    let speckle = Gamma::new(looks, 1.0 / looks).expect("positive looks");
    let data = clean
        .iter()
        .map(|&v| (v * speckle.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Ok(Scene {
        id: format!("scene_{index:05}"),
        image: Tensor::new(vec![1, h, w], data)?,
        boxes,
    })
}

/// Mirrors about the vertical axis `x = (W - 1) / 2`.
pub fn flip_horizontal(s: &Scene) -> Scene {
    let (h, w) = (s.height(), s.width());
    let src = s.image.data();
    let image = Tensor::from_fn(&[1, h, w], |i| src[(i / w) * w + (w - 1 - i % w)]);
    let boxes = s
        .boxes
        .iter()
        .map(|b| RotatedBox::new(w as f64 - 1.0 - b.cx, b.cy, b.w, b.h, -b.theta, b.class_id).expect("valid"))
        .collect();
    Scene {
        id: s.id.clone(),
        image,
        boxes,
    }
}

/// Mirrors about the horizontal axis `y = (H - 1) / 2`.
pub fn flip_vertical(s: &Scene) -> Scene {
    let (h, w) = (s.height(), s.width());
    let src = s.image.data();
    let image = Tensor::from_fn(&[1, h, w], |i| src[(h - 1 - i / w) * w + i % w]);
    let boxes = s
        .boxes
        .iter()
        .map(|b| RotatedBox::new(b.cx, h as f64 - 1.0 - b.cy, b.w, b.h, -b.theta, b.class_id).expect("valid"))
        .collect();
    Scene {
        id: s.id.clone(),
        image,
        boxes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        let cfg = SynthConfig {
            num_clusters: (0, 0),
            ..Default::default()
        };
        assert!(synth_scene(&cfg, 3).unwrap().boxes.is_empty());
        let cfg = SynthConfig::default();
        let (a, b) = (synth_scene(&cfg, 7).unwrap(), synth_scene(&cfg, 7).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, synth_scene(&cfg, 8).unwrap());
    }

    #[test]
    fn targets_outshine_background() {
        let s = synth_scene(&SynthConfig::default(), 0).unwrap();
        assert!(!s.boxes.is_empty());
        let w = s.width();
        let mean_in: f64 = s
            .boxes
            .iter()
            .map(|b| s.image.data()[b.cy.round() as usize * w + b.cx.round() as usize])
            .sum::<f64>()
            / s.boxes.len() as f64;
        let mean_all = s.image.data().iter().sum::<f64>() / s.image.numel() as f64;
        assert!(mean_in > 2.0 * mean_all, "{mean_in} vs {mean_all}");
    }

    #[test]
    fn flips_are_involutions() {
        let s = synth_scene(&SynthConfig::default(), 1).unwrap();
        let back = flip_horizontal(&flip_horizontal(&s));
        assert_eq!(back.image, s.image);
        for (a, b) in back.boxes.iter().zip(&s.boxes) {
            assert!((a.cx - b.cx).abs() < 1e-12 && (a.theta - b.theta).abs() < 1e-12);
        }
        assert_eq!(flip_vertical(&flip_vertical(&s)).image, s.image);
    }
}
