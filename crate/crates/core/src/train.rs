//! Training loop and model evaluation.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{flip_horizontal, flip_vertical, Scene};
use crate::detect::{evaluate, LossBreakdown, Metrics, DEFAULT_FOCUS_WEIGHT};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{image_batch, DenseAdVit};
use crate::optim::{AdamW, OptimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iters: u64,
    pub batch_size: usize,
    /// Validation cadence in iterations; 0 evaluates only after the last one.
    pub eval_every: u64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub iou_thresh: f64,
    /// Fraction of tokens kept by hard dropping at inference, when enabled.
    pub keep_ratio: f64,
    pub hard_drop: bool,
    pub focus_weight: f64,
    pub augment_flips: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            batch_size: 16,
            eval_every: 0,
            score_thresh: 0.05,
            nms_iou: 0.3,
            iou_thresh: 0.5,
            keep_ratio: 0.7,
            hard_drop: false,
            focus_weight: DEFAULT_FOCUS_WEIGHT,
            augment_flips: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.score_thresh > 0.0
            && self.score_thresh < 1.0
            && self.nms_iou > 0.0
            && self.nms_iou < 1.0
            && self.iou_thresh > 0.0
            && self.iou_thresh <= 1.0
            && self.keep_ratio > 0.0
            && self.keep_ratio <= 1.0
            && self.focus_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings {self:?}")))
        }
    }

    pub fn inference_keep_ratio(&self) -> Option<f64> {
        self.hard_drop.then_some(self.keep_ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const CSV_HEADER: &str = "iter,lr,total,objectness,box_reg,focus_aux";

impl LogRow {
    /// Full-precision CSV line matching [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.iter, self.lr, l.total, l.objectness, l.box_reg, l.focus_aux
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iter: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    pub elapsed: Duration,
}

/// Callbacks fired during [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _row: &EvalRow) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Detections for `scenes`, evaluated against their boxes.
pub fn evaluate_model(model: &DenseAdVit, scenes: &[&Scene], tc: &TrainConfig) -> Result<Metrics> {
    let mut dets = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(tc.batch_size.max(1)) {
        let images = image_batch(chunk)?;
        for d in model.predict(&images, tc.score_thresh, tc.nms_iou, tc.inference_keep_ratio())? {
            dets.push(d.into_iter().map(|d| d.rbox).collect::<Vec<_>>());
        }
    }
    let gts: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    Ok(evaluate(&dets, &gts, tc.iou_thresh))
}

fn augment(s: &Scene, rng: &mut ChaCha8Rng) -> Scene {
    let mut out = if rng.random::<bool>() {
        flip_horizontal(s)
    } else {
        s.clone()
    };
    if rng.random::<bool>() {
        out = flip_vertical(&out);
    }
    out
}

/// Runs `tc.iters` AdamW steps on `train_set`. Iterations are 1-based and
/// each one consumes a batch drawn from a per-epoch shuffle.
///
/// A non-finite loss or gradient aborts with [`Error::NonFinite`] before the
/// parameters are touched, so `model` is left at its last good state.
pub fn train(
    model: &mut DenseAdVit,
    optim: &OptimConfig,
    tc: &TrainConfig,
    train_set: &[&Scene],
    val_set: &[&Scene],
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    tc.validate()?;
    optim.validate()?;
    if tc.iters > 0 && train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(*optim, &model.store);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(tc.iters as usize);
    let mut evals = Vec::new();
    for it in 1..=tc.iters {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            let s = train_set[order.pop().expect("refilled")];
            batch.push(if tc.augment_flips {
                augment(s, &mut rng)
            } else {
                s.clone()
            });
        }
        let refs: Vec<&Scene> = batch.iter().collect();

        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let (vars, loss) = model.loss(&mut g, &b, &refs, tc.focus_weight)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {it}")));
        }
        g.backward(vars.total)?;
        model.store.zero_grad();
        model.store.collect_grads(&g, &b);
        drop(g);
        AdamW::clip_grad_norm(&mut model.store, optim.max_grad_norm);
        let lr = opt.next_lr();
        opt.step(&mut model.store, lr)?;

        let row = LogRow { iter: it, lr, loss };
        observer.on_step(&row)?;
        log.push(row);
        if !val_set.is_empty() && ((tc.eval_every > 0 && it % tc.eval_every == 0) || it == tc.iters) {
            let row = EvalRow {
                iter: it,
                metrics: evaluate_model(model, val_set, tc)?,
            };
            observer.on_eval(&row)?;
            evals.push(row);
        }
    }
    Ok(TrainReport {
        log,
        evals,
        elapsed: start.elapsed(),
    })
}
