//! Dataset manifest: vocabulary, size classes, split membership and dataset
//! flags, stored as JSON next to the record files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::FramingMode;
use crate::error::{FraglinkError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub vocab: Vec<String>,
    /// Linker sizes present in the training split, strictly increasing.
    pub size_classes: Vec<usize>,
    pub framing: FramingMode,
    pub with_pocket: bool,
    pub splits: SplitIds,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| FraglinkError::Config(format!("bad manifest: {e}")))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)?;
        let manifest = Self::from_json(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() {
            return Err(FraglinkError::Config("manifest vocab is empty".into()));
        }
        if !self.size_classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(FraglinkError::Config(
                "manifest size_classes must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}
