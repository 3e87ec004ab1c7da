use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{rotated_iou, RotatedBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub recall: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub matched: usize,
}

/// Class-agnostic AP over a set of images (`dets[i]` and `gts[i]` belong to
/// image `i`). Detections are visited by descending score (ties: image, then
/// position) and matched to the highest-IoU unmatched ground truth with
/// IoU ≥ `iou_thresh`. AP is the all-points interpolated area under the
/// precision–recall curve. `None` when there are no ground truths.
pub fn average_precision(dets: &[Vec<RotatedBox>], gts: &[Vec<RotatedBox>], iou_thresh: f64) -> Option<ApResult> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j)))
        .collect();
    let score = |&(i, j): &(usize, usize)| dets[i][j].score.unwrap_or(0.0);
    order.sort_by(|a, b| score(b).total_cmp(&score(a)).then(a.cmp(b)));

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &(i, j)) in order.iter().enumerate() {
        let d = &dets[i][j];
        let best = gts
            .get(i)
            .into_iter()
            .flatten()
            .enumerate()
            .filter(|(g, _)| !taken[i][*g])
            .fold(None, |best: Option<(usize, f64)>, (g, gt)| {
                let iou = rotated_iou(d, gt);
                match best {
                    Some((_, b)) if b >= iou => best,
                    _ => Some((g, iou)),
                }
            });
        if let Some((g, iou)) = best {
            if iou >= iou_thresh {
                taken[i][g] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope from the right, then sum over recall increments
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    Some(ApResult {
        ap,
        recall: tp as f64 / num_gt as f64,
        num_gt,
        num_det: order.len(),
        matched: tp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean AP over classes that have ground truth; `None` without any.
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    /// Matched ground truths over all ground truths.
    pub recall: Option<f64>,
    pub per_class: BTreeMap<usize, ApResult>,
}

/// Per-class AP, mAP and overall recall.
pub fn evaluate(dets: &[Vec<RotatedBox>], gts: &[Vec<RotatedBox>], iou_thresh: f64) -> Metrics {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|b| b.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let pick = |src: &[Vec<RotatedBox>], c: usize| -> Vec<Vec<RotatedBox>> {
        src.iter()
            .map(|v| v.iter().filter(|b| b.class_id == c).copied().collect())
            .collect()
    };
    let mut per_class = BTreeMap::new();
    for c in classes {
        if let Some(r) = average_precision(&pick(dets, c), &pick(gts, c), iou_thresh) {
            per_class.insert(c, r);
        }
    }
    let n = per_class.len();
    let (matched, total) = per_class
        .values()
        .fold((0, 0), |(m, t), r| (m + r.matched, t + r.num_gt));
    Metrics {
        map: (n > 0).then(|| per_class.values().map(|r| r.ap).sum::<f64>() / n as f64),
        recall: (total > 0).then(|| matched as f64 / total as f64),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64) -> RotatedBox {
        RotatedBox::new(cx, 0.0, 4.0, 4.0, 0.0, 0).unwrap()
    }

    #[test]
    fn single_match() {
        let r = average_precision(&[vec![b(0.1).with_score(0.9)]], &[vec![b(0.0)]], 0.5).unwrap();
        assert_eq!((r.ap, r.recall), (1.0, 1.0));
        let r = average_precision(&[vec![]], &[vec![b(0.0)]], 0.5).unwrap();
        assert_eq!((r.ap, r.recall), (0.0, 0.0));
        assert!(average_precision(&[vec![b(0.0).with_score(0.5)]], &[vec![]], 0.5).is_none());
    }

    #[test]
    fn hand_enumerated_curve() {
        // TP, FP, TP: points (p, r) = (1, 1/2), (1/2, 1/2), (2/3, 1)
        let dets = vec![vec![
            b(0.0).with_score(0.9),
            b(50.0).with_score(0.8),
            b(20.0).with_score(0.7),
        ]];
        let gts = vec![vec![b(0.0), b(20.0)]];
        let r = average_precision(&dets, &gts, 0.5).unwrap();
        assert!((r.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(r.recall, 1.0);
    }
}
