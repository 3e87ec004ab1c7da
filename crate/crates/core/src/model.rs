//! Full detector: parameters, forward passes, loss, prediction, checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::cnn::{cnn_forward, CnnParams, PyramidFeatures};
use crate::dam::{coarse_density_map, refine_mask_graph, RefineParams};
use crate::data::Scene;
use crate::defm::DefmParams;
use crate::detect::{
    assign_targets, decode_detections, detection_loss, head_forward, Detection, HeadOutput, HeadParams, LossBreakdown,
    LossVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;
use crate::tnsr;
use crate::vit::{encode, fuse_final, plain_encode, EncoderOutput, FuseParams, ModelConfig, VitParams};
use crate::Mode;

pub const CHECKPOINT_FORMAT: &str = "densevit-checkpoint";

#[derive(Debug, Clone)]
pub struct DenseAdVit {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub cnn: CnnParams,
    pub vit: VitParams,
    pub defm: Vec<DefmParams>,
    pub refine: Vec<RefineParams>,
    pub fuse: FuseParams,
    pub head: HeadParams,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: PyramidFeatures,
    /// Refined token masks `(B, N)`, one per DEFM layer.
    pub masks: Vec<Var>,
    pub encoder: EncoderOutput,
    /// `(B, D, gh, gw)`.
    pub fused: Var,
    pub head: HeadOutput,
}

/// Stacks scene images into `(B, 1, H, W)`.
pub fn image_batch(scenes: &[&Scene]) -> Result<Tensor> {
    let first = scenes.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Config(format!(
                "scene {} is {}x{}, batch is {h}x{w}",
                s.id,
                s.height(),
                s.width()
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    Ok(Tensor::new(vec![scenes.len(), 1, h, w], data)?)
}

/// Ground-truth coarse density maps `(B, 1, H, W)`.
pub fn density_batch(scenes: &[&Scene]) -> Result<Tensor> {
    let first = scenes.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        data.extend(coarse_density_map(&s.boxes, h, w).values);
    }
    Ok(Tensor::new(vec![scenes.len(), 1, h, w], data)?)
}

impl DenseAdVit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let cnn = CnnParams::new(&mut store, &mut rng, config.cnn_channels);
        let vit = VitParams::new(&mut store, &mut rng, &config);
        let defm = (0..config.defm_layers.len())
            .map(|k| DefmParams::new(&mut store, &mut rng, k, d))
            .collect();
        let refine = (0..config.defm_layers.len())
            .map(|k| RefineParams::new(&mut store, k))
            .collect();
        let fuse = FuseParams::new(&mut store, &mut rng, d, config.cnn_channels[config.fuse_level()]);
        let head = HeadParams::new(&mut store, &mut rng, d);
        Ok(DenseAdVit {
            config,
            store,
            cnn,
            vit,
            defm,
            refine,
            fuse,
            head,
        })
    }

    fn check_input(&self, g: &Graph, images: Var) -> Result<()> {
        let s = g.shape(images);
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.image_h || s[3] != self.config.image_w {
            return Err(Error::Config(format!(
                "input {s:?} does not match the configured {}x{} image",
                self.config.image_h, self.config.image_w
            )));
        }
        Ok(())
    }

    /// Full forward. Training needs `coarse` density maps `(B, 1, H, W)`;
    /// inference ignores them.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bindings,
        images: Var,
        coarse: Option<Var>,
        mode: Mode,
        keep_ratio: Option<f64>,
    ) -> Result<ForwardOutput> {
        self.check_input(g, images)?;
        let cfg = &self.config;
        let grid = cfg.grid();
        let features = cnn_forward(g, b, &self.cnn, images)?;
        let coarse = match mode {
            Mode::Training => {
                Some(coarse.ok_or_else(|| Error::Config("training forward needs ground-truth density maps".into()))?)
            }
            Mode::Inferring => None,
        };
        let mut masks = Vec::with_capacity(self.refine.len());
        for (k, rp) in self.refine.iter().enumerate() {
            let f = features.levels[cfg.mask_level(k)];
            masks.push(refine_mask_graph(g, b, rp, coarse, f, grid, mode)?);
        }
        let encoder = encode(g, b, cfg, &self.vit, &self.defm, images, &masks, mode, keep_ratio)?;
        let fused = fuse_final(
            g,
            b,
            &self.fuse,
            encoder.tokens,
            features.levels[cfg.fuse_level()],
            grid,
        )?;
        let head = head_forward(g, b, &self.head, fused)?;
        Ok(ForwardOutput {
            features,
            masks,
            encoder,
            fused,
            head,
        })
    }

    /// Final tokens of the encoder without any DEFM code path.
    pub fn plain_tokens(&self, g: &mut Graph, b: &Bindings, images: Var) -> Result<Var> {
        self.check_input(g, images)?;
        plain_encode(g, b, &self.config, &self.vit, images)
    }

    /// Builds the training objective for a batch of scenes on `g`.
    pub fn loss(
        &self,
        g: &mut Graph,
        b: &Bindings,
        batch: &[&Scene],
        lambda: f64,
    ) -> Result<(LossVars, LossBreakdown)> {
        let images = g.constant(image_batch(batch)?);
        let coarse = g.constant(density_batch(batch)?);
        let out = self.forward(g, b, images, Some(coarse), Mode::Training, None)?;
        let gts: Vec<_> = batch.iter().map(|s| s.boxes.clone()).collect();
        let targets = assign_targets(&gts, self.config.grid(), self.config.patch_size);
        detection_loss(g, &out.head, &targets, &out.encoder.focus, &out.masks, lambda)
    }

    /// GT-free detection on `(B, 1, H, W)` images.
    pub fn predict(
        &self,
        images: &Tensor,
        score_thresh: f64,
        nms_iou: f64,
        keep_ratio: Option<f64>,
    ) -> Result<Vec<Vec<Detection>>> {
        let run = |batch: Tensor| -> Result<Vec<Vec<Detection>>> {
            let mut g = Graph::inference();
            let b = self.store.bind(&mut g);
            let x = g.constant(batch);
            let out = self.forward(&mut g, &b, x, None, Mode::Inferring, keep_ratio)?;
            decode_detections(
                g.value(out.head.objectness),
                g.value(out.head.boxes),
                self.config.patch_size,
                score_thresh,
                nms_iou,
            )
        };
        if keep_ratio.is_none() {
            return run(images.clone());
        }
        let per = images.numel() / images.shape()[0];
        let mut all = Vec::new();
        for chunk in images.data().chunks(per) {
            let mut shape = images.shape().to_vec();
            shape[0] = 1;
            all.extend(run(Tensor::new(shape, chunk.to_vec())?)?);
        }
        Ok(all)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let meta = json!({
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "model": self.config,
            "extra": extra,
        });
        let tensors: Vec<(&str, &Tensor)> = self.store.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
        tnsr::save_pack(path, meta, &tensors)
    }

    /// Loads a checkpoint; returns the model and the `extra` metadata.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let ctx = path.display().to_string();
        let (meta, tensors) = tnsr::load_pack(path)?;
        if meta["format"] != CHECKPOINT_FORMAT {
            return Err(Error::format(ctx, "not a model checkpoint"));
        }
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| Error::format(ctx.clone(), format!("model config: {e}")))?;
        let mut model = DenseAdVit::new(config, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model config expects {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor {name} unknown to the model config")))?;
            let slot = model.store.tensor_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, model config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok((model, meta["extra"].clone()))
    }
}
