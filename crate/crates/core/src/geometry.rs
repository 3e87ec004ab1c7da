//! Rotated rectangles: corners, exact IoU by convex clipping, and NMS.
//!
//! Angles are measured counter-clockwise from +x to the box's `w` axis and
//! normalized to `[-π/2, π/2)`; a rectangle is invariant under a half-turn so
//! the normalization never changes the covered region.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// Intersection polygons smaller than this are treated as empty.
pub const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub class_id: usize,
    pub score: Option<f64>,
}

/// Wraps an angle into `[-π/2, π/2)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    let t = if t >= FRAC_PI_2 { t - PI } else { t };
    if t >= FRAC_PI_2 {
        -FRAC_PI_2
    } else {
        t
    }
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64, class_id: usize) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && theta.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite center/angle ({cx}, {cy}, {theta})"
            )));
        }
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!("extents must be positive, got {w}x{h}")));
        }
        Ok(RotatedBox {
            cx,
            cy,
            w,
            h,
            theta: normalize_angle(theta),
            class_id,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Counter-clockwise corners (positive shoelace area in a y-up frame).
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(dx, dy)| (self.cx + dx * c - dy * s, self.cy + dx * s + dy * c))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        RotatedBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Rotates the box (center and orientation) by `angle` about `(px, py)`.
    pub fn rotated_about(&self, px: f64, py: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (self.cx - px, self.cy - py);
        RotatedBox {
            cx: px + dx * c - dy * s,
            cy: py + dx * s + dy * c,
            theta: normalize_angle(self.theta + angle),
            ..*self
        }
    }

    /// Whether the point lies inside the (closed) rectangle.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)` of the corners.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.corners().iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        )
    }
}

pub fn box_to_corners(b: &RotatedBox) -> [Point; 4] {
    b.corners()
}

/// Shoelace area; positive for counter-clockwise vertex order.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: Point, a: Point, p: Point) -> f64 {
    (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0)
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let (cp, cq) = (cross(a, b, p), cross(a, b, q));
    let t = cp / (cp - cq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland–Hodgman: clips `subject` by convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (cur_in, prev_in) = (cross(a, b, cur) >= 0.0, cross(a, b, prev) >= 0.0);
            if cur_in {
                if !prev_in {
                    out.push(line_intersection(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    out
}

pub fn intersection_area(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let (ra, rb) = (a.w.hypot(a.h) / 2.0, b.w.hypot(b.h) / 2.0);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let area = polygon_area(&clip_polygon(&a.corners(), &b.corners()));
    if area < MIN_AREA {
        0.0
    } else {
        area
    }
}

/// Exact IoU of two rotated rectangles, in `[0, 1]`.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy NMS in descending score order (ties: lower index first). A box is
/// suppressed when its IoU with an already kept box exceeds `iou_thresh`.
/// Returns kept indices in processing order.
pub fn rotated_nms(dets: &[RotatedBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    let score = |i: usize| dets[i].score.unwrap_or(0.0);
    order.sort_by(|&i, &j| score(j).total_cmp(&score(i)).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| rotated_iou(&dets[k], &dets[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}
