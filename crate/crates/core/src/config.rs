//! Run configuration file (TOML) with environment overrides.
//!
//! ```toml
//! store_dir = "ode_store"
//! seed = 7
//! k = 40
//! criteria = ["common", "longtail", "random", "fictional"]
//! styles = ["photo", "anime"]
//! threshold = 0.5
//!
//! [endpoints.t2i]
//! base_url = "http://127.0.0.1:8001"
//! max_in_flight = 2
//!
//! [templates]
//! describe = "Please describe this image."
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::PositiveClass;
use crate::prompts::{Style, Templates};
use crate::sampler::{Criterion, DEFAULT_K};
use crate::services::ServiceEndpoint;

pub const ENV_T2I_URL: &str = "ODE_T2I_URL";
pub const ENV_DETECT_URL: &str = "ODE_DETECT_URL";
pub const ENV_MODEL_URL: &str = "ODE_MODEL_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub t2i: ServiceEndpoint,
    pub detect: ServiceEndpoint,
    pub model: ServiceEndpoint,
}

impl Default for Endpoints {
    fn default() -> Self {
        Self {
            t2i: ServiceEndpoint::new("http://127.0.0.1:8001"),
            detect: ServiceEndpoint::new("http://127.0.0.1:8002"),
            model: ServiceEndpoint::new("http://127.0.0.1:8003"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub clusters: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { clusters: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub store_dir: PathBuf,
    pub seed: u64,
    pub k: usize,
    pub criteria: Vec<Criterion>,
    pub styles: Vec<Style>,
    /// Detector confidence threshold for filtering and truth annotation.
    pub threshold: f64,
    /// Maximum hallucination targets per case.
    pub hallucination_cap: usize,
    /// Total image generations per (pair, style), including the first.
    pub max_regen_attempts: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub positive_class: PositiveClass,
    /// Optional synonym table (`canonical<TAB>surface` lines) merged over
    /// the built-in table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<PathBuf>,
    pub analysis: AnalysisConfig,
    pub endpoints: Endpoints,
    pub templates: Templates,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store_dir: PathBuf::from("ode_store"),
            seed: 0,
            k: DEFAULT_K,
            criteria: Criterion::ALL.to_vec(),
            styles: Style::ALL.to_vec(),
            threshold: 0.5,
            hallucination_cap: 3,
            max_regen_attempts: 2,
            image_width: 512,
            image_height: 512,
            positive_class: PositiveClass::Yes,
            synonyms: None,
            analysis: AnalysisConfig::default(),
            endpoints: Endpoints::default(),
            templates: Templates::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_owned(),
            message,
        })
    }

    /// Applies `ODE_*_URL` overrides from the process environment.
    pub fn apply_env(&mut self) {
        self.apply_env_from(|k| std::env::var(k).ok());
    }

    pub fn apply_env_from(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_T2I_URL) {
            self.endpoints.t2i.base_url = v;
        }
        if let Some(v) = get(ENV_DETECT_URL) {
            self.endpoints.detect.base_url = v;
        }
        if let Some(v) = get(ENV_MODEL_URL) {
            self.endpoints.model.base_url = v;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if self.criteria.is_empty() {
            return invalid("at least one criterion is required");
        }
        if self.styles.is_empty() {
            return invalid("at least one style is required");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return invalid("threshold must be in [0,1]");
        }
        if self.max_regen_attempts == 0 {
            return invalid("max_regen_attempts must be at least 1");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return invalid("image size must be positive");
        }
        if self.analysis.clusters == 0 {
            return invalid("analysis.clusters must be at least 1");
        }
        self.templates
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for ep in [&self.endpoints.t2i, &self.endpoints.detect, &self.endpoints.model] {
            ep.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Copy with secrets removed, suitable for manifests.
    pub fn redacted(&self) -> Self {
        let mut c = self.clone();
        c.endpoints.t2i = c.endpoints.t2i.redacted();
        c.endpoints.detect = c.endpoints.detect.redacted();
        c.endpoints.model = c.endpoints.model.redacted();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.k, 40);
        assert_eq!(c.hallucination_cap, 3);
        assert_eq!(c.threshold, 0.5);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml(
            "seed = 7\ncriteria = [\"fictional\"]\n[endpoints.t2i]\nbase_url = \"mock://t2i\"\nmax_in_flight = 2\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.criteria, vec![Criterion::Fictional]);
        assert_eq!(c.endpoints.t2i.max_in_flight, 2);
        assert_eq!(c.endpoints.t2i.retries, 3);
        assert_eq!(c.endpoints.model.base_url, "http://127.0.0.1:8003");
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn env_overrides_urls() {
        let mut c = RunConfig::default();
        c.apply_env_from(|k| (k == ENV_MODEL_URL).then(|| "mock://refuser".to_string()));
        assert_eq!(c.endpoints.model.base_url, "mock://refuser");
        assert_eq!(c.endpoints.t2i.base_url, "http://127.0.0.1:8001");
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.templates.image_prompt = "two things".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }
}
