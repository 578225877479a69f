//! One structured config file for every pipeline stage. Missing sections
//! and fields fall back to defaults, so a file only needs the keys it
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::ActivityConfig;
use crate::classifier::{ClassifierConfig, ClassifierTrainConfig};
use crate::mixit::TrainConfig;
use crate::separator::SeparatorConfig;
use crate::synthbird::SynthDatasetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("cannot write config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sections: `separator`, `separator_train`, `classifier` (with nested
/// `frontend` and `pcen`), `classifier_train` (with nested `augment`),
/// `activity`, `synth`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChorusConfig {
    pub separator: SeparatorConfig,
    pub separator_train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: ClassifierTrainConfig,
    pub activity: ActivityConfig,
    pub synth: SynthDatasetConfig,
}

/// `None` means defaults everywhere.
pub fn load_config(path: Option<&Path>) -> Result<ChorusConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(ChorusConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source: Box::new(source),
    })
}

pub fn save_config(path: &Path, cfg: &ChorusConfig) -> Result<(), ConfigError> {
    std::fs::write(path, toml::to_string_pretty(cfg)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chorus.toml");
        let cfg = ChorusConfig::default();
        save_config(&path, &cfg).unwrap();
        let loaded = load_config(Some(&path)).unwrap();
        assert_eq!(loaded.separator.n_sources, cfg.separator.n_sources);
        assert_eq!(loaded.classifier.block_widths, cfg.classifier.block_widths);
        assert_eq!(loaded.synth.n_species, cfg.synth.n_species);
        assert_eq!(
            loaded.classifier_train.augment.gain_range,
            cfg.classifier_train.augment.gain_range
        );
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "[separator]\nn_sources = 2\n").unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.separator.n_sources, 2);
        assert_eq!(cfg.separator.n_basis, SeparatorConfig::default().n_basis);
        assert_eq!(cfg.synth.n_species, 8);
    }

    #[test]
    fn no_file_means_defaults() {
        let cfg = load_config(None).unwrap();
        assert_eq!(cfg.classifier.window_s, 5.0);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("typo.toml");
        std::fs::write(&path, "[separtaor]\nn_sources = 2\n").unwrap();
        assert!(matches!(
            load_config(Some(&path)).unwrap_err(),
            ConfigError::Parse { .. }
        ));
    }
}
