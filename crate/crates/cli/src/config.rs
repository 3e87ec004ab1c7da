use std::path::{Path, PathBuf};

use densevit::data::SynthConfig;
use densevit::optim::OptimConfig;
use densevit::train::TrainConfig;
use densevit::vit::ModelConfig;
use densevit::{Error, Result};
use serde::{Deserialize, Serialize};

/// In-memory synthetic split used when no manifest is given: scenes
/// `0..train_scenes` train, the next `val_scenes` validate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub train_scenes: u64,
    pub val_scenes: u64,
    /// Scenes written by `synth`.
    pub count: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            train_scenes: 200,
            val_scenes: 50,
            count: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parameter initialization seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelConfig::toy(),
            optim: OptimConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            context: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// `--seed` reseeds initialization, shuffling and synthesis together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if (self.synth.image_h, self.synth.image_w) != (self.model.image_h, self.model.image_w) {
            return Err(Error::Config(format!(
                "synthetic scenes are {}x{} but the model expects {}x{}",
                self.synth.image_h, self.synth.image_w, self.model.image_h, self.model.image_w
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::File {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
