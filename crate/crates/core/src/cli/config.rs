use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cut::CUTConfig;
use crate::data_model::SyntheticConfig;
use crate::error::{Error, Result};
use crate::geometry::CropConfig;
use crate::metrics::CropMode;
use crate::ssl::SSLConfig;

/// Environment variable naming the directory for persistent caches.
pub const CACHE_DIR_ENV: &str = "HERBAGE_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ElevationMode {
    Http,
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElevationConfig {
    pub source: ElevationMode,
    pub endpoint: String,
    pub dataset: String,
    pub fixture_file: Option<PathBuf>,
    pub cache_file: Option<PathBuf>,
}

impl Default for ElevationConfig {
    fn default() -> Self {
        Self {
            source: ElevationMode::Fixture,
            endpoint: "https://api.opentopodata.org".into(),
            dataset: "eudem25m".into(),
            fixture_file: None,
            cache_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub n_ground: usize,
    pub n_drone: usize,
    #[serde(flatten)]
    pub config: SyntheticConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_ground: 64,
            n_drone: 8,
            config: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropSection {
    pub mode: CropMode,
    #[serde(flatten)]
    pub config: CropConfig,
}

impl Default for CropSection {
    fn default() -> Self {
        Self {
            mode: CropMode::Random,
            config: CropConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslateSection {
    pub steps: usize,
    pub checkpoint_every: usize,
    #[serde(flatten)]
    pub cut: CUTConfig,
}

impl Default for TranslateSection {
    fn default() -> Self {
        Self {
            steps: 200,
            checkpoint_every: 50,
            cut: CUTConfig::desk_scale(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslSection {
    /// Share of labeled ground records held out for validation.
    pub validation_fraction: f64,
    #[serde(flatten)]
    pub config: SSLConfig,
}

impl Default for SslSection {
    fn default() -> Self {
        Self {
            validation_fraction: 0.2,
            config: SSLConfig::desk_scale(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSection {
    pub mode: CropMode,
    pub max_crops: Option<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            mode: CropMode::Random,
            max_crops: None,
        }
    }
}

/// Every stage's settings in one file. Command-line flags override the
/// values loaded from it; the merged result is written into each artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of synthetic data generation and translation training.
    pub seed: u64,
    pub synth: SynthSection,
    pub elevation: ElevationConfig,
    pub crop: CropSection,
    pub translate: TranslateSection,
    pub ssl: SslSection,
    pub evaluate: EvaluateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSection::default(),
            elevation: ElevationConfig::default(),
            crop: CropSection::default(),
            translate: TranslateSection::default(),
            ssl: SslSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing config {}", p.display()), e))
            }
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Elevation cache location: the configured file, else
    /// `$HERBAGE_CACHE_DIR/elevation_cache.json` when the variable is set.
    pub fn elevation_cache(&self) -> Option<PathBuf> {
        self.elevation.cache_file.clone().or_else(|| {
            std::env::var_os(CACHE_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(|d| PathBuf::from(d).join("elevation_cache.json"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"seed": 5, "ssl": {"steps": 10}}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.ssl.config.steps, 10);
        assert_eq!(c.ssl.config.batch_size, SSLConfig::desk_scale().batch_size);
        assert_eq!(c.crop.config, CropConfig::default());
    }

    #[test]
    fn round_trip_and_unknown_keys() {
        let c = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_value(c.to_value()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sede": 1}"#).is_err());
    }
}
