use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cvmh_core::network::NetworkConfig;
use cvmh_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
}

/// Everything `train` and `eval` need. Relative paths are taken from the
/// directory holding the config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Checkpoint `eval` reads; defaults to `<output_dir>/best.cvck`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cvmh_core::Error::Io { path: path.into(), source: e })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(cvmh_core::Error::from)
            .with_context(|| format!("reading {}", path.display()))?;
        let root = path.parent().unwrap_or(Path::new(""));
        cfg.data.manifest = root.join(&cfg.data.manifest);
        cfg.output_dir = root.join(&cfg.output_dir);
        if let Some(c) = &mut cfg.checkpoint {
            *c = root.join(&*c);
        }
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("best.cvck"))
    }
}
