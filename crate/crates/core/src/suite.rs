//! Finite-difference checks of every model component and of the full
//! training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cnn::{cnn_forward, CnnParams};
use crate::dam::{refine_mask_graph, RefineParams};
use crate::data::{synth_scene, Scene, SynthConfig};
use crate::defm::{defm_forward, DefmParams};
use crate::detect::{assign_targets, detection_loss, head_forward, HeadParams};
use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::model::DenseAdVit;
use crate::params::{normal, uniform, Bindings, ParamStore};
use crate::tensor::Tensor;
use crate::vit::{attention_block, embed, fuse_final, patchify, BlockParams, FocusOutput, FuseParams, ModelConfig};
use crate::Mode;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl ModuleCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Random linear functional of `v`, so every output coordinate matters.
fn project(g: &mut Graph, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = g.constant(uniform(rng, g.shape(v), 1.0));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

/// Checks `f` with respect to every tensor of `store` followed by `inputs`.
fn check_store<F>(store: &ParamStore, inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bindings, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let mut params: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    params.extend(inputs.iter().cloned());
    grad_check(
        |g, vars| {
            let b = Bindings::from_vars(vars[..n].to_vec());
            f(g, &b, &vars[n..])
        },
        &params,
        opts,
    )
}

/// Scenes sized for `cfg`, with small targets so tiny images stay valid.
pub fn check_scenes(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    let side = cfg.image_h.min(cfg.image_w) as f64;
    let len_max = (side / 2.0 - 1.0).min(16.0);
    let sc = SynthConfig {
        image_h: cfg.image_h,
        image_w: cfg.image_w,
        num_clusters: (1, 1),
        targets_per_cluster: (1, 3),
        target_length: (len_max / 2.0, len_max),
        target_width: (2.0, (len_max / 2.0).max(2.0)),
        cluster_radius: side / 4.0,
        cell_size: cfg.patch_size,
        seed,
        ..SynthConfig::default()
    };
    (0..count as u64).map(|i| synth_scene(&sc, i)).collect()
}

/// Runs one check per component and one over the full training loss.
pub fn model_suite(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<Vec<ModuleCheck>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = cfg.grid();
    let (h, w, d, n) = (cfg.image_h, cfg.image_w, cfg.embed_dim, cfg.num_tokens());
    let bsz = 2;
    let mut out = Vec::new();
    let mut record = |name: &str, r: GradCheckReport| {
        out.push(ModuleCheck {
            module: name.to_string(),
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
        })
    };

    let image = uniform(&mut rng, &[bsz, 1, h, w], 1.0);
    let proj_seed: u64 = rng.random();

    let mut store = ParamStore::new();
    let cnn = CnnParams::new(&mut store, &mut rng, cfg.cnn_channels);
    let r = check_store(&store, std::slice::from_ref(&image), opts, |g, b, x| {
        let mut pr = ChaCha8Rng::seed_from_u64(proj_seed);
        let f = cnn_forward(g, b, &cnn, x[0])?;
        let mut acc = g.scalar(0.0);
        for level in f.levels {
            let p = project(g, level, &mut pr)?;
            acc = g.add(acc, p)?;
        }
        Ok(acc)
    })?;
    record("cnn", r);

    let level = cfg.mask_level(0);
    let c = cfg.cnn_channels[level];
    let (fh, fw) = (h >> (level + 1), w >> (level + 1));
    let mut store = ParamStore::new();
    let rp = RefineParams::new(&mut store, level);
    let coarse = Tensor::from_fn(&[bsz, 1, h, w], |_| rng.random_range(0.0..1.0));
    let feature = normal(&mut rng, &[bsz, c, fh, fw], 1.0);
    let r = check_store(&store, &[coarse, feature], opts, |g, b, x| {
        let mut pr = ChaCha8Rng::seed_from_u64(proj_seed);
        let t = refine_mask_graph(g, b, &rp, Some(x[0]), x[1], (gh, gw), Mode::Training)?;
        let i = refine_mask_graph(g, b, &rp, None, x[1], (gh, gw), Mode::Inferring)?;
        let (t, i) = (project(g, t, &mut pr)?, project(g, i, &mut pr)?);
        Ok(g.add(t, i)?)
    })?;
    record("dam.refine", r);

    let p2 = cfg.patch_size * cfg.patch_size;
    let proj = normal(&mut rng, &[p2, d], 0.3);
    let pos = normal(&mut rng, &[n, d], 0.3);
    let r = check_store(&ParamStore::new(), &[image.clone(), proj, pos], opts, |g, _, x| {
        let mut pr = ChaCha8Rng::seed_from_u64(proj_seed);
        let patches = patchify(g, x[0], cfg.patch_size)?;
        let z = embed(g, patches, x[1], x[2])?;
        project(g, z, &mut pr)
    })?;
    record("vit.embed", r);

    let mut store = ParamStore::new();
    let block = BlockParams::new(&mut store, &mut rng, 0, d, cfg.mlp_ratio * d);
    let z = normal(&mut rng, &[bsz, n, d], 1.0);
    let r = check_store(&store, std::slice::from_ref(&z), opts, |g, b, x| {
        let mut pr = ChaCha8Rng::seed_from_u64(proj_seed);
        let y = attention_block(g, b, &block, x[0], cfg.num_heads)?;
        project(g, y, &mut pr)
    })?;
    record("vit.attention", r);

    let mut store = ParamStore::new();
    let dp = DefmParams::new(&mut store, &mut rng, 0, d);
    let mask = Tensor::from_fn(&[bsz, n], |_| rng.random_range(0.05..0.95));
    let r = check_store(&store, &[z.clone(), mask], opts, |g, b, x| {
        let mut pr = ChaCha8Rng::seed_from_u64(proj_seed);
        let o = defm_forward(g, b, &dp, x[0], x[1], Mode::Training)?;
        let (p, t) = (project(g, o.probs, &mut pr)?, project(g, o.tokens, &mut pr)?);
        Ok(g.add(p, t)?)
    })?;
    record("defm", r);

    let cf = cfg.cnn_channels[cfg.fuse_level()];
    let mut store = ParamStore::new();
    let fp = FuseParams::new(&mut store, &mut rng, d, cf);
    let fmap = normal(&mut rng, &[bsz, cf, gh, gw], 1.0);
    let r = check_store(&store, &[z, fmap], opts, |g, b, x| {
        let mut pr = ChaCha8Rng::seed_from_u64(proj_seed);
        let y = fuse_final(g, b, &fp, x[0], x[1], (gh, gw))?;
        project(g, y, &mut pr)
    })?;
    record("vit.fuse", r);

    let mut store = ParamStore::new();
    let hp = HeadParams::new(&mut store, &mut rng, d);
    let fused = normal(&mut rng, &[bsz, d, gh, gw], 1.0);
    let logits = normal(&mut rng, &[bsz, n, 2], 1.0);
    let ps = cfg.patch_size as f64;
    let gts: Vec<Vec<RotatedBox>> = (0..bsz)
        .map(|_| {
            (0..2)
                .map(|_| {
                    RotatedBox::new(
                        rng.random_range(0.5..(gw as f64 - 0.5)) * ps,
                        rng.random_range(0.5..(gh as f64 - 0.5)) * ps,
                        rng.random_range(0.5..1.5) * ps,
                        rng.random_range(0.3..1.0) * ps,
                        rng.random_range(-1.5..1.5),
                        0,
                    )
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let targets = assign_targets(&gts, (gh, gw), cfg.patch_size);
    let focus_mask = Tensor::from_fn(&[bsz, n], |i| if i % 3 == 0 { 0.8 } else { 0.2 });
    let r = check_store(&store, &[fused, logits], opts, |g, b, x| {
        let head = head_forward(g, b, &hp, x[0])?;
        let probs = g.softmax(x[1]);
        let focus = FocusOutput {
            level: 0,
            probs,
            logits: x[1],
        };
        let m = g.constant(focus_mask.clone());
        let (v, _) = detection_loss(g, &head, &targets, &[focus], &[m], 0.5)?;
        Ok(v.total)
    })?;
    record("detect.loss", r);

    let model = DenseAdVit::new(cfg.clone(), rng.random())?;
    let scenes = check_scenes(cfg, bsz, seed)?;
    let refs: Vec<&Scene> = scenes.iter().collect();
    let r = check_store(&model.store, &[], opts, |g, b, _| {
        let (v, _) = model.loss(g, b, &refs, 0.5)?;
        Ok(v.total)
    })?;
    record("end_to_end", r);

    if out.iter().any(|m| !m.max_rel_error.is_finite()) {
        return Err(Error::NonFinite("gradient suite".into()));
    }
    Ok(out)
}
