use std::path::Path;

use anyhow::{Context, Result};
use macformer::generator::GeneratorConfig;
use macformer::model::ModelConfig;
use macformer::mtos::TrainConfig;
use macformer::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenarios written by `gen-data` unless `--count` is given.
    pub count: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 32,
            generator: GeneratorConfig::default(),
        }
    }
}

/// Everything a command needs, as read from the `--config` TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing the resolved configuration")
    }

    pub fn validate(&self) -> macformer::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        if self.model.modes < 2 {
            return Err(Error::Config(format!("model.modes = {} but at least 2 are needed", self.model.modes)));
        }
        let (m, g) = (&self.model, &self.data.generator);
        if (m.history, m.future) != (g.history, g.future) {
            return Err(Error::Config(format!(
                "model horizon h={} f={} differs from data.generator h={} f={}",
                m.history, m.future, g.history, g.future
            )));
        }
        Ok(())
    }
}
