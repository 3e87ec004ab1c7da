use densevit::defm::{
    broadcast_mask, channel_split, defm_forward, focusing_probability, fuse, masked_global_pool, train_modulate,
    DefmParams,
};
use densevit::gradcheck::{grad_check, GradCheckOptions};
use densevit::params::{normal, Bindings, ParamStore};
use densevit::{Graph, Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(c: usize, seed: u64) -> (ParamStore, DefmParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = DefmParams::new(&mut store, &mut rng, 0, c);
    (store, p)
}

fn pool(glob: &Tensor, mask: &Tensor) -> Tensor {
    let mut g = Graph::inference();
    let z = g.constant(glob.clone());
    let m = g.constant(mask.clone());
    let pm = broadcast_mask(&mut g, m, glob.shape()[2]).unwrap();
    let out = masked_global_pool(&mut g, z, pm).unwrap();
    g.value(out).clone()
}

#[test]
fn component_shapes_and_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = normal(&mut rng, &[2, 9, 64], 1.0);
    let mut g = Graph::inference();
    let zv = g.constant(z.clone());
    let (loc, glob) = channel_split(&mut g, zv).unwrap();
    assert_eq!((g.shape(loc), g.shape(glob)), (&[2, 9, 32][..], &[2, 9, 32][..]));
    let back = g.concat(&[loc, glob], 2).unwrap();
    assert_eq!(g.value(back), &z);

    let m = g.constant(Tensor::full(&[1, 16], 0.25));
    let pm = broadcast_mask(&mut g, m, 8).unwrap();
    assert_eq!(g.shape(pm), &[1, 16, 8]);
    assert!(g.value(pm).data().iter().all(|&x| x == 0.25));

    let l = g.constant(normal(&mut rng, &[1, 4, 8], 1.0));
    let gv = g.constant(normal(&mut rng, &[1, 8], 1.0));
    let f = fuse(&mut g, l, gv).unwrap();
    assert_eq!(g.shape(f), &[1, 4, 16]);
    for tok in g.value(f).data().chunks(16) {
        assert_eq!(&tok[8..], g.value(gv).data());
    }

    let odd = g.constant(Tensor::zeros(&[1, 2, 5]));
    assert!(channel_split(&mut g, odd).is_err());
}

#[test]
fn modulation_by_phase() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = normal(&mut rng, &[1, 3, 4], 1.0);
    let mut mask = Tensor::ones(&[1, 3]);
    let mut g = Graph::inference();
    let zv = g.constant(z.clone());
    let ones = g.constant(mask.clone());
    let y = train_modulate(&mut g, zv, ones, Mode::Training).unwrap();
    assert_eq!(g.value(y), &z);
    mask.set(&[0, 1], 0.0);
    let mv = g.constant(mask);
    let y = train_modulate(&mut g, zv, mv, Mode::Training).unwrap();
    assert!(g.value(y).data()[4..8].iter().all(|&x| x == 0.0));
    assert_eq!(&g.value(y).data()[..4], &z.data()[..4]);
    let y = train_modulate(&mut g, zv, mv, Mode::Inferring).unwrap();
    assert_eq!(g.value(y), &z);
}

#[test]
fn softmax_closed_forms() {
    let (mut store, p) = params(8, 3);
    for prm in store.iter_mut() {
        if prm.name.contains("mlp") {
            prm.tensor.data_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = normal(&mut rng, &[2, 5, 8], 1.0);
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let zv = g.constant(z.clone());
    let (probs, _) = focusing_probability(&mut g, &b, &p, zv).unwrap();
    assert!(g.value(probs).data().iter().all(|&x| x == 0.5));

    store.tensor_mut(p.fc2_b).data_mut().copy_from_slice(&[2f64.ln(), 0.0]);
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let zv = g.constant(z);
    let (probs, _) = focusing_probability(&mut g, &b, &p, zv).unwrap();
    for pair in g.value(probs).data().chunks(2) {
        assert!((pair[0] - 2.0 / 3.0).abs() < 1e-15 && (pair[1] - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn unit_mask_pools_to_the_exact_token_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1, 3, 16, 64] {
        let glob = normal(&mut rng, &[2, n, 6], 3.0);
        let g = pool(&glob, &Tensor::ones(&[2, n]));
        for bi in 0..2 {
            for c in 0..6 {
                let mut s = 0.0;
                for k in 0..n {
                    s += glob.get(&[bi, k, c]);
                }
                assert_eq!(g.get(&[bi, c]), s / n as f64);
            }
        }
    }
}

#[test]
fn one_hot_mask_selects_a_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let glob = normal(&mut rng, &[1, 5, 4], 1.0);
    let mut mask = Tensor::zeros(&[1, 5]);
    mask.set(&[0, 3], 1.0);
    let g = pool(&glob, &mask);
    assert_eq!(g.data(), &glob.data()[12..16]);
}

#[test]
fn empty_mask_stays_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let glob = normal(&mut rng, &[2, 4, 3], 1.0);
    let g = pool(&glob, &Tensor::zeros(&[2, 4]));
    assert!(g.data().iter().all(|&x| x == 0.0));
}

#[test]
fn uniform_masks_give_identical_inference_focus() {
    let (store, p) = params(8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = normal(&mut rng, &[2, 6, 8], 1.0);
    let run = |c: f64| {
        let mut g = Graph::inference();
        let b = store.bind(&mut g);
        let zv = g.constant(z.clone());
        let m = g.constant(Tensor::full(&[2, 6], c));
        let o = defm_forward(&mut g, &b, &p, zv, m, Mode::Inferring).unwrap();
        (
            g.value(o.global).clone(),
            g.value(o.probs).clone(),
            g.value(o.tokens).clone(),
        )
    };
    let (a, b) = (run(0.3), run(0.9));
    assert!(a.0.max_abs_diff(&b.0) < 1e-10);
    assert!(a.1.max_abs_diff(&b.1) < 1e-10);
    assert!(a.2.max_abs_diff(&b.2) < 1e-10);
    assert!(a.1.all_finite() && a.2.all_finite());
}

#[test]
fn composition_order() {
    let (store, p) = params(8, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = normal(&mut rng, &[2, 4, 8], 1.0);
    let mask = Tensor::from_fn(&[2, 4], |_| rng.random_range(0.0..1.0));
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let (zv, mv) = (g.constant(z), g.constant(mask));
    let o = defm_forward(&mut g, &b, &p, zv, mv, Mode::Training).unwrap();

    let h = g.layer_norm(zv, b[p.pre_g], b[p.pre_b], 1e-5).unwrap();
    let h = g.gelu(h);
    let (loc, glob) = channel_split(&mut g, h).unwrap();
    let pm = broadcast_mask(&mut g, mv, 4).unwrap();
    let gl = masked_global_pool(&mut g, glob, pm).unwrap();
    let f = fuse(&mut g, loc, gl).unwrap();
    let m = train_modulate(&mut g, f, mv, Mode::Training).unwrap();
    let (probs, _) = focusing_probability(&mut g, &b, &p, m).unwrap();
    let keep = g.slice(probs, 2, 0, 1).unwrap();
    let tokens = g.mul(zv, keep).unwrap();
    assert_eq!(g.value(o.probs), g.value(probs));
    assert_eq!(g.value(o.global), g.value(gl));
    assert_eq!(g.value(o.tokens), g.value(tokens));

    let wrong = g.constant(Tensor::ones(&[2, 5]));
    assert!(defm_forward(&mut g, &b, &p, zv, wrong, Mode::Training).is_err());
}

#[test]
fn whole_module_matches_finite_differences() {
    let (store, p) = params(6, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|q| q.tensor.clone()).collect();
    inputs.push(normal(&mut rng, &[2, 5, 6], 1.0));
    inputs.push(Tensor::from_fn(&[2, 5], |_| rng.random_range(0.05..0.95)));
    let w_probs = normal(&mut rng, &[2, 5, 2], 1.0);
    let w_tokens = normal(&mut rng, &[2, 5, 6], 1.0);
    for mode in [Mode::Training, Mode::Inferring] {
        let r = grad_check(
            |g, v| {
                let b = Bindings::from_vars(v[..n].to_vec());
                let o = defm_forward(g, &b, &p, v[n], v[n + 1], mode)?;
                let (wp, wt) = (g.constant(w_probs.clone()), g.constant(w_tokens.clone()));
                let a = g.mul(o.probs, wp)?;
                let c = g.mul(o.tokens, wt)?;
                let (a, c) = (g.sum(a), g.sum(c));
                Ok(g.add(a, c)?)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?}");
    }
}

#[test]
fn gradient_reaches_every_parameter_and_input() {
    let (store, p) = params(6, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let z = g.leaf(normal(&mut rng, &[2, 5, 6], 1.0).with_requires_grad(true));
    let m = g.leaf(Tensor::from_fn(&[2, 5], |_| rng.random_range(0.1..0.9)).with_requires_grad(true));
    let o = defm_forward(&mut g, &b, &p, z, m, Mode::Training).unwrap();
    let w = g.constant(normal(&mut rng, &[2, 5, 2], 1.0));
    let l = g.mul(o.probs, w).unwrap();
    let l = g.sum(l);
    g.backward(l).unwrap();
    for (i, v) in b.vars().iter().enumerate() {
        let gr = g.grad(*v).expect("parameter gradient");
        assert!(gr.iter().any(|&x| x != 0.0), "parameter {i} got no gradient");
    }
    assert!(g.grad(z).unwrap().iter().any(|&x| x != 0.0));
    assert!(g.grad(m).unwrap().iter().any(|&x| x != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_ignores_mask_scale(seed in 0u64..10_000, c in 1e-3f64..1e3, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glob = normal(&mut rng, &[2, n, 3], 2.0);
        let mask = Tensor::from_fn(&[2, n], |_| rng.random_range(0.0..1.0));
        let scaled = Tensor::from_fn(&[2, n], |i| mask.data()[i] * c);
        prop_assert!(pool(&glob, &mask).max_abs_diff(&pool(&glob, &scaled)) < 1e-10);
    }

    #[test]
    fn pooled_vector_lies_in_the_token_hull(seed in 0u64..10_000, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glob = normal(&mut rng, &[1, n, 4], 5.0);
        let mask = Tensor::from_fn(&[1, n], |_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) });
        let g = pool(&glob, &mask);
        if mask.data().iter().any(|&m| m > 0.0) {
            for c in 0..4 {
                let col: Vec<f64> = (0..n).map(|k| glob.get(&[0, k, c])).collect();
                let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
                prop_assert!(g.get(&[0, c]) >= lo - 1e-12 && g.get(&[0, c]) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn focus_rows_are_probability_pairs(seed in 0u64..10_000, scale in 0.01f64..100.0, train in any::<bool>()) {
        let (store, p) = params(8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
        let mut g = Graph::inference();
        let b = store.bind(&mut g);
        let z = g.constant(normal(&mut rng, &[2, 7, 8], scale));
        let m = g.constant(Tensor::from_fn(&[2, 7], |_| rng.random_range(0.0..1.0)));
        let mode = if train { Mode::Training } else { Mode::Inferring };
        let o = defm_forward(&mut g, &b, &p, z, m, mode).unwrap();
        for pair in g.value(o.probs).data().chunks(2) {
            prop_assert!(pair.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((pair[0] + pair[1] - 1.0).abs() < 1e-12);
        }
    }
}
