//! Run configuration file (TOML). Every section is optional; omitted keys
//! take their defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::AcquisitionConfig;
use crate::generators::{GeneratorEndpoint, SyntheticGenerator};
use crate::interrogator::{GpSettings, TrialConfig};
use crate::search_space::{SpaceConfig, UnitPoint};
use crate::targets::{ApiEndpoint, CellRates, PlantedBiasSpec, Task, DEFAULT_HASH_SEED, DEFAULT_HOTSPOT_RADIUS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialSection {
    pub iterations: usize,
    pub initial_design: usize,
    pub seed: u64,
    pub task: Task,
}

impl Default for TrialSection {
    fn default() -> Self {
        let t = TrialConfig::default();
        Self {
            iterations: t.iterations,
            initial_design: t.initial_design,
            seed: t.seed,
            task: t.task,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Planted-bias classifier evaluated in process.
    #[default]
    Synthetic,
    /// Remote classifier over HTTP.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    pub kind: TargetKind,
    pub url: String,
    /// Name of the environment variable holding the Authorization header value.
    pub auth_header_env: Option<String>,
    pub timeout_s: f64,
    pub retries: usize,
    pub backoff_s: Vec<f64>,
    pub rps: f64,
    /// Planted target: per-cell rates in race-major order (black/man, black/woman, ...).
    pub cell_rates: Option<[CellRates; 8]>,
    /// Planted target: hotspot centre in the unit cube; defaults to the Black/Man cell centre.
    pub hotspot_center: Option<Vec<f64>>,
    pub hotspot_radius: f64,
    pub hash_seed: u64,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            kind: TargetKind::Synthetic,
            url: String::new(),
            auth_header_env: None,
            timeout_s: 30.0,
            retries: 3,
            backoff_s: vec![1.0, 2.0, 4.0],
            rps: 5.0,
            cell_rates: None,
            hotspot_center: None,
            hotspot_radius: DEFAULT_HOTSPOT_RADIUS,
            hash_seed: DEFAULT_HASH_SEED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Procedural images rendered in process.
    #[default]
    Synthetic,
    /// Generator service over HTTP.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    pub url: String,
    /// Side length of synthetic images in pixels.
    pub image_size: u32,
    pub timeout_s: f64,
    pub retries: usize,
    pub backoff_s: Vec<f64>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Synthetic,
            url: "http://127.0.0.1:8080".into(),
            image_size: 64,
            timeout_s: 30.0,
            retries: 3,
            backoff_s: vec![1.0, 2.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub out_dir: PathBuf,
    pub mean_faces: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/latest"),
            mean_faces: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub trial: TrialSection,
    pub space: SpaceConfig,
    pub gp: GpSettings,
    pub acquisition: AcquisitionConfig,
    pub target: TargetSection,
    pub generator: GeneratorSection,
    pub report: ReportSection,
}

fn duration(secs: f64, what: &str) -> Result<Duration, ConfigError> {
    Duration::try_from_secs_f64(secs)
        .map_err(|_| ConfigError::Invalid(format!("{what} must be a non-negative number of seconds")))
}

fn durations(secs: &[f64], what: &str) -> Result<Vec<Duration>, ConfigError> {
    secs.iter().map(|&s| duration(s, what)).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn trial_config(&self) -> TrialConfig {
        TrialConfig {
            iterations: self.trial.iterations,
            initial_design: self.trial.initial_design,
            seed: self.trial.seed,
            task: self.trial.task,
            space: self.space.clone(),
            gp: self.gp.clone(),
            acquisition: self.acquisition.clone(),
        }
    }

    pub fn planted_spec(&self) -> Result<PlantedBiasSpec, ConfigError> {
        let dim = self.space.dim();
        let mut spec = PlantedBiasSpec::default_for_dim(dim);
        if let Some(rates) = self.target.cell_rates {
            spec.cell_rates = rates;
        }
        if let Some(center) = &self.target.hotspot_center {
            if center.len() != dim {
                return Err(ConfigError::Invalid(format!(
                    "target.hotspot_center has {} coordinates, search space has {dim}",
                    center.len()
                )));
            }
            spec.hotspot_center = UnitPoint::new(center.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        spec.hotspot_radius = self.target.hotspot_radius;
        spec.hash_seed = self.target.hash_seed;
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    /// HTTP endpoint for the classifier; the credential is read from the
    /// environment variable named by `target.auth_header_env`.
    pub fn api_endpoint(&self) -> Result<ApiEndpoint, ConfigError> {
        let t = &self.target;
        if t.url.is_empty() {
            return Err(ConfigError::Invalid(
                "target.url is required for the http target".into(),
            ));
        }
        let auth_header = match &t.auth_header_env {
            None => None,
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ConfigError::Invalid(format!(
                    "environment variable {var} (target.auth_header_env) is not set"
                ))
            })?),
        };
        let ep = ApiEndpoint {
            url: t.url.clone(),
            auth_header,
            timeout: duration(t.timeout_s, "target.timeout_s")?,
            retries: t.retries,
            backoff: durations(&t.backoff_s, "target.backoff_s")?,
            max_requests_per_second: t.rps,
        };
        ep.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(ep)
    }

    pub fn generator_endpoint(&self) -> Result<GeneratorEndpoint, ConfigError> {
        let g = &self.generator;
        if g.url.is_empty() {
            return Err(ConfigError::Invalid(
                "generator.url is required for the remote generator".into(),
            ));
        }
        Ok(GeneratorEndpoint {
            base_url: g.url.clone(),
            timeout: duration(g.timeout_s, "generator.timeout_s")?,
            retries: g.retries,
            backoff: durations(&g.backoff_s, "generator.backoff_s")?,
        })
    }

    pub fn synthetic_generator(&self) -> Result<SyntheticGenerator, ConfigError> {
        if self.generator.image_size < 8 {
            return Err(ConfigError::Invalid("generator.image_size must be at least 8".into()));
        }
        Ok(SyntheticGenerator::new(self.generator.image_size, self.space.d_z))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trial_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match self.target.kind {
            TargetKind::Synthetic => {
                self.planted_spec()?;
            }
            TargetKind::Http => {
                self.api_endpoint()?;
            }
        }
        match self.generator.kind {
            GeneratorKind::Synthetic => {
                self.synthetic_generator()?;
            }
            GeneratorKind::Remote => {
                self.generator_endpoint()?;
            }
        }
        Ok(())
    }
}
