use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::error::Result;
use crate::geometry::{rotated_nms, RotatedBox};
use crate::graph::{Graph, Var};
use crate::params::{normal, Bindings, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Raw log-extents are clamped to this magnitude when decoding.
pub const MAX_LOG_EXTENT: f64 = 8.0;

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub obj_w: ParamId,
    pub obj_b: ParamId,
    pub box_w: ParamId,
    pub box_b: ParamId,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Self {
        HeadParams {
            obj_w: store.add("head.obj.weight", normal(rng, &[1, d, 1, 1], 0.01), true),
            // prior objectness of about 0.1
            obj_b: store.add("head.obj.bias", Tensor::full(&[1], -2.2), false),
            box_w: store.add("head.box.weight", normal(rng, &[5, d, 1, 1], 0.01), true),
            box_b: store.add("head.box.bias", Tensor::zeros(&[5]), false),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `(B, 1, gh, gw)` logits.
    pub objectness: Var,
    /// `(B, 5, gh, gw)`: raw x/y offsets, log-extents, angle.
    pub boxes: Var,
}

pub fn head_forward(g: &mut Graph, b: &Bindings, p: &HeadParams, fused: Var) -> Result<HeadOutput> {
    let h = g.gelu(fused);
    Ok(HeadOutput {
        objectness: g.conv2d(h, b[p.obj_w], Some(b[p.obj_b]), 1, 0)?,
        boxes: g.conv2d(h, b[p.box_w], Some(b[p.box_b]), 1, 0)?,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Box from the raw outputs of cell `(row, col)`.
pub fn decode_cell(raw: [f64; 5], row: usize, col: usize, patch: usize, class_id: usize) -> Result<RotatedBox> {
    let p = patch as f64;
    RotatedBox::new(
        (col as f64 + sigmoid(raw[0])) * p,
        (row as f64 + sigmoid(raw[1])) * p,
        p * raw[2].clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT).exp(),
        p * raw[3].clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT).exp(),
        FRAC_PI_2 * raw[4].tanh(),
        class_id,
    )
}

/// Raw outputs that [`decode_cell`] maps back onto `b`. The center must lie
/// strictly inside the cell and the angle strictly inside `(-π/2, π/2)`.
pub fn encode_box(b: &RotatedBox, row: usize, col: usize, patch: usize) -> [f64; 5] {
    let p = patch as f64;
    let logit = |t: f64| (t / (1.0 - t)).ln();
    [
        logit(b.cx / p - col as f64),
        logit(b.cy / p - row as f64),
        (b.w / p).ln(),
        (b.h / p).ln(),
        (b.theta / FRAC_PI_2).atanh(),
    ]
}

/// Regression targets: in-cell offsets, log-extents, and the doubled-angle pair.
pub fn regression_targets(b: &RotatedBox, row: usize, col: usize, patch: usize) -> [f64; 6] {
    let p = patch as f64;
    let (s, c) = (2.0 * b.theta).sin_cos();
    [
        b.cx / p - col as f64,
        b.cy / p - row as f64,
        (b.w / p).ln(),
        (b.h / p).ln(),
        s,
        c,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `(B, 1, gh, gw)` with 1 at assigned cells.
    pub objectness: Tensor,
    /// `(B, 6, gh, gw)`, zero away from positives.
    pub boxes: Tensor,
    pub num_pos: usize,
    /// Per image and cell, the index of the assigned ground truth.
    pub assigned: Vec<Vec<Option<usize>>>,
}

/// One ground truth per cell (the cell holding its center). Collisions keep
/// the larger box, then the lower index.
pub fn assign_targets(gts: &[Vec<RotatedBox>], grid: (usize, usize), patch: usize) -> Targets {
    let (gh, gw) = grid;
    let n = gh * gw;
    let bsz = gts.len();
    let mut obj = Tensor::zeros(&[bsz, 1, gh, gw]);
    let mut boxes = Tensor::zeros(&[bsz, 6, gh, gw]);
    let mut assigned: Vec<Vec<Option<usize>>> = vec![vec![None; n]; bsz];
    let mut num_pos = 0;
    for (bi, list) in gts.iter().enumerate() {
        for (k, b) in list.iter().enumerate() {
            let col = ((b.cx / patch as f64).floor().max(0.0) as usize).min(gw - 1);
            let row = ((b.cy / patch as f64).floor().max(0.0) as usize).min(gh - 1);
            let cell = row * gw + col;
            match assigned[bi][cell] {
                Some(j) if list[j].area() >= b.area() => {}
                _ => assigned[bi][cell] = Some(k),
            }
        }
        for (cell, a) in assigned[bi].iter().enumerate() {
            if let Some(k) = a {
                num_pos += 1;
                obj.data_mut()[bi * n + cell] = 1.0;
                let t = regression_targets(&list[*k], cell / gw, cell % gw, patch);
                for (c, v) in t.iter().enumerate() {
                    boxes.data_mut()[(bi * 6 + c) * n + cell] = *v;
                }
            }
        }
    }
    Targets {
        objectness: obj,
        boxes,
        num_pos,
        assigned,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub rbox: RotatedBox,
    pub grid_cell: usize,
}

/// Thresholds sigmoid objectness, decodes boxes and applies rotated NMS,
/// per image. Detections come out in descending score order.
pub fn decode_detections(
    objectness: &Tensor,
    boxes: &Tensor,
    patch: usize,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let (os, bs) = (objectness.shape(), boxes.shape());
    if os.len() != 4 || os[1] != 1 || bs.len() != 4 || bs[1] != 5 || os[0] != bs[0] || os[2..] != bs[2..] {
        return Err(TensorError::mismatch("decode_detections", os, bs).into());
    }
    let (bsz, gh, gw) = (os[0], os[2], os[3]);
    let n = gh * gw;
    let mut out = Vec::with_capacity(bsz);
    for bi in 0..bsz {
        let mut cands = Vec::new();
        let mut cells = Vec::new();
        for cell in 0..n {
            let score = sigmoid(objectness.data()[bi * n + cell]);
            if score < score_thresh {
                continue;
            }
            let raw: [f64; 5] = std::array::from_fn(|c| boxes.data()[(bi * 5 + c) * n + cell]);
            if let Ok(b) = decode_cell(raw, cell / gw, cell % gw, patch, 0) {
                cands.push(b.with_score(score));
                cells.push(cell);
            }
        }
        let kept = rotated_nms(&cands, nms_iou);
        out.push(
            kept.into_iter()
                .map(|i| Detection {
                    rbox: cands[i],
                    grid_cell: cells[i],
                })
                .collect(),
        );
    }
    Ok(out)
}

/// `image_id cx cy w h theta score class_id` with six decimals.
pub fn format_detection(image_id: &str, d: &Detection) -> String {
    let b = &d.rbox;
    format!(
        "{image_id} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {}",
        b.cx,
        b.cy,
        b.w,
        b.h,
        b.theta,
        b.score.unwrap_or(0.0),
        b.class_id
    )
}
