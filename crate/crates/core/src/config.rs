//! Run configuration: one TOML document covering data, model, training and benchmarking.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::data::{SceneSpec, TaskAvail};
use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub val_fraction: f64,
    pub task: TaskAvail,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            val_fraction: 0.1,
            task: TaskAvail::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        let s = self.scene.image_size;
        if self.model.trunk.input_size != (s, s) {
            return Err(CoreError::Config(format!(
                "model input {:?} differs from scene size {s}",
                self.model.trunk.input_size
            )));
        }
        if self.model.det.num_classes != self.scene.num_classes {
            return Err(CoreError::Config(format!(
                "detection classes ({}) differ from scene classes ({})",
                self.model.det.num_classes, self.scene.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.data.val_fraction) {
            return Err(CoreError::Config("val_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Writes the resolved configuration to `<dir>/config.resolved`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.resolved");
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn unknown_keys_and_mismatches_rejected() {
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[scene]\nimage_size = 32\n").is_err());
    }
}
