use std::f64::consts::PI;

use densevit::geometry::{rotated_iou, rotated_nms, RotatedBox};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pair(rng: &mut ChaCha8Rng) -> (RotatedBox, RotatedBox) {
    let a = RotatedBox::new(
        rng.random_range(0.0..10.0),
        rng.random_range(0.0..10.0),
        rng.random_range(1.0..6.0),
        rng.random_range(1.0..6.0),
        rng.random_range(-PI..PI),
        0,
    )
    .unwrap();
    let b = RotatedBox::new(
        a.cx + rng.random_range(-3.0..3.0),
        a.cy + rng.random_range(-3.0..3.0),
        rng.random_range(1.0..6.0),
        rng.random_range(1.0..6.0),
        rng.random_range(-PI..PI),
        0,
    )
    .unwrap();
    (a, b)
}

/// Jittered-grid point sampling over the union's bounding box.
fn monte_carlo_iou(a: &RotatedBox, b: &RotatedBox, side: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let (x0, y0) = (ax0.min(bx0), ay0.min(by0));
    let (dx, dy) = ((ax1.max(bx1) - x0) / side as f64, (ay1.max(by1) - y0) / side as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.random::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.random::<f64>()) * dy;
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = random_pair(&mut rng);
        let mc = monte_carlo_iou(&a, &b, 1000, &mut rng);
        worst = worst.max((rotated_iou(&a, &b) - mc).abs());
    }
    assert!(worst < 3e-3, "worst deviation {worst}");
}

#[test]
fn axis_aligned_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (w1, h1, w2, h2) = (
            rng.random_range(0.5..4.0),
            rng.random_range(0.5..4.0),
            rng.random_range(0.5..4.0),
            rng.random_range(0.5..4.0),
        );
        let (dx, dy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let a = RotatedBox::new(0.0, 0.0, w1, h1, 0.0, 0).unwrap();
        let b = RotatedBox::new(dx, dy, w2, h2, 0.0, 0).unwrap();
        let ox = ((w1 / 2.0).min(dx + w2 / 2.0) - (-w1 / 2.0f64).max(dx - w2 / 2.0)).max(0.0);
        let oy = ((h1 / 2.0).min(dy + h2 / 2.0) - (-h1 / 2.0f64).max(dy - h2 / 2.0)).max(0.0);
        let i = ox * oy;
        let expect = if i == 0.0 { 0.0 } else { i / (w1 * h1 + w2 * h2 - i) };
        assert!((rotated_iou(&a, &b) - expect).abs() < 1e-12);
    }
}

#[test]
fn nms_three_box_oracle() {
    let base = RotatedBox::new(10.0, 10.0, 6.0, 3.0, 0.4, 0).unwrap();
    let dets = vec![
        base.with_score(0.95),
        base.translated(0.4, 0.2).with_score(0.9),
        base.translated(30.0, 0.0).with_score(0.6),
    ];
    assert!(rotated_iou(&dets[0], &dets[1]) > 0.5);
    assert_eq!(rotated_iou(&dets[0], &dets[2]), 0.0);
    assert_eq!(rotated_nms(&dets, 0.5), vec![0, 2]);
}

fn arb_box() -> impl Strategy<Value = RotatedBox> {
    (0.0..20.0f64, 0.0..20.0f64, 0.5..8.0f64, 0.5..8.0f64, -PI..PI)
        .prop_map(|(cx, cy, w, h, t)| RotatedBox::new(cx, cy, w, h, t, 0).unwrap())
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (rotated_iou(&a, &b), rotated_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corner_centroid_is_center(a in arb_box()) {
        let c = a.corners();
        let mx = c.iter().map(|p| p.0).sum::<f64>() / 4.0;
        let my = c.iter().map(|p| p.1).sum::<f64>() / 4.0;
        prop_assert!((mx - a.cx).abs() < 1e-9 && (my - a.cy).abs() < 1e-9);
    }

    #[test]
    fn iou_rotation_invariant(a in arb_box(), b in arb_box(), px in -10.0..30.0f64, py in -10.0..30.0f64, ang in -PI..PI) {
        let before = rotated_iou(&a, &b);
        let after = rotated_iou(&a.rotated_about(px, py, ang), &b.rotated_about(px, py, ang));
        prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
    }

    #[test]
    fn nms_order_independent(
        boxes in prop::collection::vec((arb_box(), 0u32..1000), 1..12),
        seed in any::<u64>(),
    ) {
        // distinct scores make the result a set independent of input order
        let mut dets: Vec<RotatedBox> = Vec::new();
        for (i, (b, s)) in boxes.iter().enumerate() {
            dets.push(b.with_score((*s as f64 + i as f64 * 1e-6) / 1000.0));
        }
        let kept: Vec<RotatedBox> = rotated_nms(&dets, 0.3).into_iter().map(|i| dets[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..dets.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<RotatedBox> = perm.iter().map(|&i| dets[i]).collect();
        let kept2: Vec<RotatedBox> = rotated_nms(&shuffled, 0.3).into_iter().map(|i| shuffled[i]).collect();
        prop_assert_eq!(kept, kept2);
    }

    #[test]
    fn nms_keeps_global_max(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 1..12)) {
        let dets: Vec<RotatedBox> = boxes.iter().map(|(b, s)| b.with_score(*s)).collect();
        let kept = rotated_nms(&dets, 0.5);
        let best = (0..dets.len())
            .max_by(|&i, &j| dets[i].score.unwrap().total_cmp(&dets[j].score.unwrap()).then(j.cmp(&i)))
            .unwrap();
        prop_assert_eq!(kept[0], best);
    }
}
