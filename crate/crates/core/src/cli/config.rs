use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::PenumbraMode;
use crate::training::TrainConfig;

/// Dataset location and cross-validation layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Case directory root; falls back to `STROKESEG_DATA_ROOT`, then the
    /// manifest's directory.
    pub root: Option<PathBuf>,
    pub folds: usize,
    pub fold_seed: u64,
    pub penumbra: PenumbraMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            root: None,
            folds: 3,
            fold_seed: 0,
            penumbra: PenumbraMode::Exclusive,
        }
    }
}

/// Contents of the `--config` file: a `[data]` and a `[train]` section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Checks values and that the manifest, when required, exists.
    pub fn validate(&self, needs_manifest: bool) -> Result<()> {
        self.train.validate()?;
        if self.data.folds < 2 {
            return Err(Error::Config("data.folds must be at least 2".into()));
        }
        if needs_manifest {
            let manifest = self.manifest()?;
            if !manifest.is_file() {
                return Err(Error::Config(format!(
                    "manifest {} does not exist",
                    manifest.display()
                )));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.data
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no manifest given (data.manifest or --manifest)".into()))
    }
}
