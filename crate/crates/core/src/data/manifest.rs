use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotations::{format_annotations, parse_annotations, Annotation};
use super::pgm::{read_pgm, write_pgm};
use super::synth::Scene;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub image_path: String,
    pub annotation_path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
    pub split: Split,
}

/// Even positions train, odd positions validate.
pub fn parity_split(ids: &[String]) -> Split {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, id) in ids.iter().enumerate() {
        if i % 2 == 0 { &mut train } else { &mut val }.push(id.clone());
    }
    Split { train, val }
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        for id in m.split.train.iter().chain(&m.split.val) {
            if !m.images.iter().any(|e| &e.id == id) {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("split names unknown image {id:?}"),
                ));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
    }
}

/// Writes `images/<id>.pgm`, `annotations/<id>.txt` and `manifest.json`
/// under `out_dir`, with a parity split.
pub fn write_dataset(scenes: &[Scene], out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out = out_dir.as_ref();
    for sub in ["images", "annotations"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))?;
    }
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        let image_path = format!("images/{}.pgm", s.id);
        let annotation_path = format!("annotations/{}.txt", s.id);
        write_pgm(out.join(&image_path), &s.image)?;
        let ann: Vec<Annotation> = s
            .boxes
            .iter()
            .map(|b| Annotation {
                image_id: s.id.clone(),
                rbox: *b,
            })
            .collect();
        let p = out.join(&annotation_path);
        std::fs::write(&p, format_annotations(&ann)?).map_err(|e| Error::file(&p, e))?;
        images.push(ManifestEntry {
            id: s.id.clone(),
            image_path,
            annotation_path,
        });
    }
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    let m = Manifest {
        images,
        split: parity_split(&ids),
    };
    m.save(out.join("manifest.json"))?;
    Ok(m)
}

/// Scenes loaded from a manifest, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub split: Split,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let mp = manifest_path.as_ref();
        let m = Manifest::load(mp)?;
        let base = mp.parent().unwrap_or(Path::new("."));
        let mut scenes = Vec::with_capacity(m.images.len());
        for e in &m.images {
            let image = read_pgm(resolve(base, &e.image_path))?;
            let ann_path = resolve(base, &e.annotation_path);
            let boxes = parse_annotations(&ann_path)?
                .into_iter()
                .filter(|a| a.image_id == e.id)
                .map(|a| a.rbox)
                .collect();
            scenes.push(Scene {
                id: e.id.clone(),
                image,
                boxes,
            });
        }
        Ok(Dataset { scenes, split: m.split })
    }

    fn subset(&self, ids: &[String]) -> Vec<&Scene> {
        ids.iter()
            .filter_map(|id| self.scenes.iter().find(|s| &s.id == id))
            .collect()
    }

    pub fn train(&self) -> Vec<&Scene> {
        self.subset(&self.split.train)
    }

    pub fn val(&self) -> Vec<&Scene> {
        self.subset(&self.split.val)
    }
}
