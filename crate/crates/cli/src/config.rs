use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use intembed::lsa::SvdConfig;
use intembed::lstm::LstmLmConfig;
use intembed::probes::LogisticConfig;
use intembed::skipgram::SkipgramConfig;
use intembed::vocab::DEFAULT_MIN_COUNT;
use serde::{Deserialize, Serialize};

/// Everything an experiment needs. Loaded from TOML; command-line flags
/// override individual fields and the resolved value is embedded in every
/// report record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub split_seed: u64,
    pub min_count: u64,
    pub paths: Paths,
    pub lsa: LsaSettings,
    pub skipgram: SkipgramConfig,
    pub lstm: LstmLmConfig,
    pub probe: ProbeSettings,
    pub tasks: TaskSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            split_seed: 0,
            min_count: DEFAULT_MIN_COUNT,
            paths: Paths::default(),
            lsa: LsaSettings::default(),
            skipgram: SkipgramConfig::default(),
            lstm: LstmLmConfig::default(),
            probe: ProbeSettings::default(),
            tasks: TaskSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Root for the corpus, fixtures and outputs when not given explicitly.
    pub data_dir: Option<PathBuf>,
    pub dump: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsaSettings {
    pub k: usize,
    pub svd: SvdConfig,
}

impl Default for LsaSettings {
    fn default() -> Self {
        LsaSettings {
            k: 65,
            svd: SvdConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub train: (u64, u64),
    pub test: (u64, u64),
    pub regression: (u64, u64),
    pub ridge_eps: f64,
    pub logistic: LogisticConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            train: (1, 1000),
            test: (1001, 2000),
            regression: (1, 2000),
            ridge_eps: intembed::probes::DEFAULT_RIDGE_EPS,
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSettings {
    /// Ranking depth for completion and expansion.
    pub k: usize,
}

impl Default for TaskSettings {
    fn default() -> Self {
        TaskSettings { k: 5 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| intembed::Error::Format(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths.corpus_dir.clone().unwrap_or_else(|| self.data_dir().join("corpus"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| self.data_dir().join("results"))
    }
}
