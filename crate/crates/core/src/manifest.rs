//! JSON manifest tying together the files of one experiment run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{AdvConfig, Regime};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Paths are stored as written; relative paths resolve against the
/// directory containing the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub splits: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub reports: BTreeMap<String, PathBuf>,
    pub regime: Option<Regime>,
    pub adv: Option<AdvConfig>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            dataset: None,
            splits: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            reports: BTreeMap::new(),
            regime: None,
            adv: None,
            seeds: Vec::new(),
        }
    }
}

impl ExperimentManifest {
    pub fn files(&self) -> impl Iterator<Item = &PathBuf> {
        self.dataset
            .iter()
            .chain(self.splits.values())
            .chain(self.checkpoints.values())
            .chain(self.reports.values())
    }

    /// Fails on the first referenced file that does not exist under `base`.
    pub fn check_files(&self, base: &Path) -> Result<()> {
        for f in self.files() {
            let p = base.join(f);
            if !p.is_file() {
                return Err(Error::Contract(format!(
                    "manifest references missing file {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads a manifest and checks that every file it names exists.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::from_json(&fs::read_to_string(path)?)?;
        m.check_files(path.parent().unwrap_or(Path::new(".")))?;
        Ok(m)
    }
}
