use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::head::{HeadOutput, Targets};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};
use crate::vit::FocusOutput;

pub const DEFAULT_FOCUS_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub objectness: f64,
    pub box_reg: f64,
    pub focus_aux: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub objectness: Var,
    pub box_reg: Var,
    pub focus_aux: Var,
}

/// Mean objectness BCE over all cells, smooth-L1 box regression averaged over
/// positives, and `lambda` times the mean focus cross-entropy against each
/// level's mask binarized at 0.5 (channel 0 = keep).
pub fn detection_loss(
    g: &mut Graph,
    head: &HeadOutput,
    targets: &Targets,
    focus: &[FocusOutput],
    masks: &[Var],
    lambda: f64,
) -> Result<(LossVars, LossBreakdown)> {
    let obj_t = g.constant(targets.objectness.clone());
    let bce = g.bce_with_logits(head.objectness, obj_t)?;
    let objectness = g.mean(bce);

    let box_reg = if targets.num_pos == 0 {
        g.scalar(0.0)
    } else {
        let raw = head.boxes;
        let off = g.slice(raw, 1, 0, 2)?;
        let off = g.sigmoid(off);
        let ext = g.slice(raw, 1, 2, 2)?;
        let ang = g.slice(raw, 1, 4, 1)?;
        let ang = g.tanh(ang);
        let two_theta = g.mul_scalar(ang, 2.0 * FRAC_PI_2);
        let s = g.sin(two_theta);
        let c = g.cos(two_theta);
        let pred = g.concat(&[off, ext, s, c], 1)?;
        let tgt = g.constant(targets.boxes.clone());
        let diff = g.sub(pred, tgt)?;
        let l = g.smooth_l1(diff);
        let pos = g.constant(targets.objectness.clone());
        let l = g.mul(l, pos)?;
        let l = g.sum(l);
        g.mul_scalar(l, 1.0 / targets.num_pos as f64)
    };

    if focus.len() != masks.len() {
        return Err(TensorError::invalid(
            "detection_loss",
            format!("{} focus outputs but {} masks", focus.len(), masks.len()),
        )
        .into());
    }
    let focus_aux = if focus.is_empty() {
        g.scalar(0.0)
    } else {
        let mut acc: Option<Var> = None;
        for (f, &m) in focus.iter().zip(masks) {
            let mv = g.value(m);
            let onehot: Vec<f64> = mv
                .data()
                .iter()
                .flat_map(|&v| if v >= 0.5 { [1.0, 0.0] } else { [0.0, 1.0] })
                .collect();
            let mut shape = mv.shape().to_vec();
            shape.push(2);
            let onehot = g.constant(Tensor::new(shape, onehot)?);
            let logp = g.log_softmax(f.logits);
            let picked = g.mul(logp, onehot)?;
            let tokens = (g.value(picked).numel() / 2) as f64;
            let ce = g.sum(picked);
            let ce = g.mul_scalar(ce, -1.0 / tokens);
            acc = Some(match acc {
                None => ce,
                Some(a) => g.add(a, ce)?,
            });
        }
        let sum = acc.expect("nonempty");
        g.mul_scalar(sum, 1.0 / focus.len() as f64)
    };

    let det = g.add(objectness, box_reg)?;
    let weighted = g.mul_scalar(focus_aux, lambda);
    let total = g.add(det, weighted)?;
    let val = |v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown {
        total: val(total),
        objectness: val(objectness),
        box_reg: val(box_reg),
        focus_aux: val(focus_aux),
        lambda,
    };
    Ok((
        LossVars {
            total,
            objectness,
            box_reg,
            focus_aux,
        },
        breakdown,
    ))
}
