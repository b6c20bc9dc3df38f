//! JSON run configuration shared by the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bifurcated::{AttentionPathPolicy, PathMode};
use crate::error::{Error, Result};
use crate::io_model::CostModel;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "BIFURC_CONFIG";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    pub path: PathMode,
    pub auto_threshold: usize,
    pub batch: usize,
    pub max_new: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub format: OutputFormat,
    pub preset: String,
    pub workers: usize,
    /// Fitted by calibration; analytic tables use it when asked to.
    pub cost_model: Option<CostModel>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            path: PathMode::Auto,
            auto_threshold: AttentionPathPolicy::DEFAULT_AUTO_THRESHOLD,
            batch: 4,
            max_new: 32,
            temperature: 0.8,
            top_p: 0.95,
            format: OutputFormat::Csv,
            preset: "7b-mh-8k".into(),
            workers: 1,
            cost_model: None,
        }
    }
}

impl BenchConfig {
    pub fn policy(&self) -> AttentionPathPolicy {
        AttentionPathPolicy {
            mode: self.path,
            auto_threshold: self.auto_threshold,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `explicit` if given, else the file named by [`CONFIG_ENV`],
    /// else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::from_file(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::from_file(&PathBuf::from(p)),
            _ => Ok(Self::default()),
        }
    }

    /// Writes the configuration, refusing to replace an existing file
    /// unless `force` is set.
    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        if path.exists() && !force {
            return Err(Error::WouldOverwrite(path.display().to_string()));
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
