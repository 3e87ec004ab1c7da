use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use densevit::dam::{coarse_density_map, pool_mask_to_tokens};
use densevit::data::{read_pgm, synth_scene, write_dataset, write_pgm, Dataset, Scene};
use densevit::detect::{format_detection, Metrics};
use densevit::gradcheck::GradCheckOptions;
use densevit::model::{image_batch, DenseAdVit};
use densevit::suite::{model_suite, ModuleCheck, DEFAULT_TOLERANCE};
use densevit::train::{evaluate_model, train, EvalRow, LogRow, TrainObserver, CSV_HEADER};
use densevit::vit::ModelConfig;
use densevit::{tnsr, Error, Result, Tensor};
use serde_json::json;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.json";

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::File {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(file_err(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(file_err(path))?))
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    cfg.synth.validate()?;
    let scenes: Vec<Scene> = (0..cfg.data.count)
        .map(|i| synth_scene(&cfg.synth, i))
        .collect::<Result<_>>()?;
    let m = write_dataset(&scenes, &cfg.out_dir)?;
    let boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
    eprintln!(
        "wrote {} scenes ({boxes} targets; {} train, {} val) to {}",
        m.images.len(),
        m.split.train.len(),
        m.split.val.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

/// Coarse map clipped to `[0, 1]`, then stretched so its peak is white.
pub fn heatmap(values: &[f64], h: usize, w: usize) -> Result<Tensor> {
    let clipped: Vec<f64> = values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let peak = clipped.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Ok(Tensor::new(vec![1, h, w], clipped.iter().map(|v| v * scale).collect())?)
}

pub fn mask(cfg: &RunConfig, manifest: &Path) -> Result<()> {
    cfg.model.validate()?;
    let ds = Dataset::load(manifest)?;
    create_dir(&cfg.out_dir)?;
    for s in &ds.scenes {
        let (h, w) = (s.height(), s.width());
        let map = coarse_density_map(&s.boxes, h, w);
        let tokens = pool_mask_to_tokens(&map, cfg.model.patch_size)?;
        let out = |suffix: &str| cfg.out_dir.join(format!("{}.{suffix}", s.id));
        write_pgm(out("density.pgm"), &heatmap(&map.values, h, w)?)?;
        tnsr::save(out("density.tnsr"), &map.to_tensor())?;
        let t = Tensor::new(vec![tokens.grid_h, tokens.grid_w], tokens.values)?;
        tnsr::save(out("tokens.tnsr"), &t)?;
    }
    eprintln!(
        "wrote density maps for {} images to {}",
        ds.scenes.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

/// Train and validation scenes: from a manifest when one is configured,
/// otherwise synthesized in memory.
pub struct Scenes {
    all: Vec<Scene>,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Scenes {
    pub fn load(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Self> {
        match manifest.or(cfg.data.manifest.as_deref()) {
            Some(m) => {
                let ds = Dataset::load(m)?;
                let index = |ids: &[String]| -> Vec<usize> {
                    ids.iter()
                        .filter_map(|id| ds.scenes.iter().position(|s| &s.id == id))
                        .collect()
                };
                let (train, val) = (index(&ds.split.train), index(&ds.split.val));
                Ok(Scenes {
                    all: ds.scenes,
                    train,
                    val,
                })
            }
            None => {
                let (nt, nv) = (cfg.data.train_scenes, cfg.data.val_scenes);
                let all = (0..nt + nv)
                    .map(|i| synth_scene(&cfg.synth, i))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Scenes {
                    all,
                    train: (0..nt as usize).collect(),
                    val: (nt as usize..(nt + nv) as usize).collect(),
                })
            }
        }
    }

    pub fn split(&self, name: &str) -> Result<Vec<&Scene>> {
        let pick = |ix: &[usize]| ix.iter().map(|&i| &self.all[i]).collect();
        match name {
            "train" => Ok(pick(&self.train)),
            "val" => Ok(pick(&self.val)),
            "all" => Ok(self.all.iter().collect()),
            other => Err(Error::Config(format!("unknown split {other:?}; use train, val or all"))),
        }
    }
}

struct Logs {
    csv: BufWriter<File>,
    evals: BufWriter<File>,
}

impl TrainObserver for Logs {
    fn on_step(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.csv, "{}", row.to_csv())?;
        if row.iter.is_multiple_of(100) {
            eprintln!("iter {:>6}  lr {:.3e}  loss {:.5}", row.iter, row.lr, row.loss.total);
        }
        Ok(())
    }

    fn on_eval(&mut self, row: &EvalRow) -> Result<()> {
        writeln!(self.evals, "{}", serde_json::to_string(row)?)?;
        self.evals.flush()?;
        Ok(())
    }
}

/// Returns the checkpoint path. A non-finite loss saves the last good
/// weights before the error is passed on.
pub fn train_cmd(cfg: &RunConfig, manifest: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Some(m) = manifest {
        cfg.data.manifest = Some(std::path::absolute(m)?);
    }
    let cfg = &cfg;
    create_dir(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join(CONFIG_ECHO_FILE))?;
    let scenes = Scenes::load(cfg, None)?;
    let (train_set, val_set) = (scenes.split("train")?, scenes.split("val")?);
    let mut model = DenseAdVit::new(cfg.model.clone(), cfg.seed)?;
    let mut logs = Logs {
        csv: create(&cfg.out_dir.join(TRAIN_LOG_FILE))?,
        evals: create(&cfg.out_dir.join(EVAL_LOG_FILE))?,
    };
    writeln!(logs.csv, "{CSV_HEADER}")?;
    let result = train(&mut model, &cfg.optim, &cfg.train, &train_set, &val_set, &mut logs);
    logs.csv.flush()?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    match result {
        Ok(report) => {
            model.save(&ckpt, json!({"run": cfg, "iters_completed": report.log.len()}))?;
            eprintln!(
                "trained {} iterations in {:.1}s; checkpoint {}",
                report.log.len(),
                report.elapsed.as_secs_f64(),
                ckpt.display()
            );
            Ok(ckpt)
        }
        Err(e) => {
            if e.is_numeric() {
                model.save(&ckpt, json!({"run": cfg, "aborted": e.to_string()}))?;
                eprintln!("aborted; last good weights saved to {}", ckpt.display());
            }
            Err(e)
        }
    }
}

/// Loads a checkpoint with the run settings it was trained under. An
/// explicit config must agree with the checkpoint's model.
pub fn load_checkpoint(path: &Path, explicit: Option<&RunConfig>) -> Result<(DenseAdVit, RunConfig)> {
    let (model, extra) = DenseAdVit::load(path)?;
    let cfg = match explicit {
        Some(c) => {
            if c.model != model.config {
                return Err(Error::Config(format!(
                    "config model {:?} does not match checkpoint model {:?}",
                    c.model, model.config
                )));
            }
            c.clone()
        }
        None => match extra.get("run") {
            Some(run) => serde_json::from_value(run.clone()).map_err(|e| Error::Format {
                context: path.display().to_string(),
                msg: format!("run settings: {e}"),
            })?,
            None => RunConfig {
                model: model.config.clone(),
                ..RunConfig::default()
            },
        },
    };
    Ok((model, cfg))
}

pub fn eval(model: &DenseAdVit, cfg: &RunConfig, manifest: Option<&Path>, split: &str) -> Result<Metrics> {
    let scenes = Scenes::load(cfg, manifest)?;
    let set = scenes.split(split)?;
    evaluate_model(model, &set, &cfg.train)
}

/// One detection line per kept box, for every scene.
pub fn infer(model: &DenseAdVit, cfg: &RunConfig, scenes: &[Scene]) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for chunk in scenes.chunks(cfg.train.batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let dets = model.predict(
            &image_batch(&refs)?,
            cfg.train.score_thresh,
            cfg.train.nms_iou,
            cfg.train.inference_keep_ratio(),
        )?;
        for (s, d) in chunk.iter().zip(dets) {
            lines.extend(d.iter().map(|d| format_detection(&s.id, d)));
        }
    }
    Ok(lines)
}

pub fn images_as_scenes(paths: &[PathBuf]) -> Result<Vec<Scene>> {
    paths
        .iter()
        .map(|p| {
            Ok(Scene {
                id: p
                    .file_stem()
                    .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned()),
                image: read_pgm(p)?,
                boxes: Vec::new(),
            })
        })
        .collect()
}

pub fn gradcheck(seed: u64, corrupt: bool) -> Result<Vec<ModuleCheck>> {
    let opts = GradCheckOptions {
        corrupt_analytic: corrupt,
        ..GradCheckOptions::default()
    };
    model_suite(&ModelConfig::tiny(), seed, &opts)
}

pub fn print_gradcheck(checks: &[ModuleCheck]) {
    println!("{:<16} {:>14} {:>8}  status", "module", "max_rel_error", "coords");
    for c in checks {
        let status = if c.passed(DEFAULT_TOLERANCE) { "ok" } else { "FAIL" };
        println!(
            "{:<16} {:>14.3e} {:>8}  {status}",
            c.module, c.max_rel_error, c.coords_checked
        );
    }
}
