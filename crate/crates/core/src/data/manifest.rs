use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::Normalization;
use super::{load_pair, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// JSON dataset description. Relative paths resolve against the directory
/// holding the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub pairs: Vec<PairEntry>,
    pub num_classes: usize,
    pub palette: Vec<[u8; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ignore_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("manifest needs at least one class"));
        }
        if self.palette.len() < self.num_classes {
            return Err(Error::config(format!(
                "palette has {} colours for {} classes",
                self.palette.len(),
                self.num_classes
            )));
        }
        let colours = &self.palette[..self.num_classes];
        if (1..colours.len()).any(|i| colours[..i].contains(&colours[i])) {
            return Err(Error::config("palette colours must be distinct"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::config("class_names must name every class"));
        }
        if let Some(n) = &self.normalization {
            n.validate()?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization.clone().unwrap_or_default()
    }

    /// Load every pair, checking label values against the class count.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.pairs
            .iter()
            .map(|p| {
                let label_path = self.resolve(&p.label);
                let s = load_pair(&self.resolve(&p.image), &label_path)?;
                if let Some(&bad) = s
                    .labels
                    .iter()
                    .find(|&&l| l as usize >= self.num_classes && Some(l) != self.ignore_index)
                {
                    return Err(Error::format(
                        label_path,
                        format!("label {bad} out of range for {} classes", self.num_classes),
                    ));
                }
                Ok(s)
            })
            .collect()
    }
}
