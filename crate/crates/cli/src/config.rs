//! Layered run configuration: a TOML file supplies defaults that individual
//! command-line flags override.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

/// Settings shared by every subcommand.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalSection {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Optimizer and schedule overrides for the training command.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub alpha: Option<f64>,
    pub ramp: Option<usize>,
    pub coarse_fraction: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub flow_frozen: Option<bool>,
}

/// Rollout gate overrides for the extrapolation command.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolateSection {
    pub exist_threshold: Option<f64>,
    pub opacity_floor: Option<f64>,
    pub max_prune_fraction: Option<f64>,
}

/// Parsed configuration file; every section and field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub global: GlobalSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub extrapolate: ExtrapolateSection,
}

/// Read and parse a configuration file.
pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Load the file when a path was given, defaults otherwise.
pub fn load_opt(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        Some(p) => load(p),
        None => Ok(FileConfig::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file_parses_every_section() {
        let cfg: FileConfig = toml::from_str(
            "[global]\nseed = 7\nthreads = 2\n\
             [train]\nlr = 0.002\nalpha = 0.001\nramp = 500\ncoarse_fraction = 0.25\n\
             checkpoint_every = 100\nflow_frozen = true\n\
             [extrapolate]\nexist_threshold = 0.4\nopacity_floor = 0.01\nmax_prune_fraction = 0.2\n",
        )
        .expect("valid config");
        assert_eq!(cfg.global.seed, Some(7));
        assert_eq!(cfg.global.threads, Some(2));
        assert_eq!(cfg.train.lr, Some(0.002));
        assert_eq!(cfg.train.ramp, Some(500));
        assert_eq!(cfg.train.flow_frozen, Some(true));
        assert_eq!(cfg.extrapolate.exist_threshold, Some(0.4));
        assert_eq!(cfg.extrapolate.max_prune_fraction, Some(0.2));
    }

    #[test]
    fn empty_file_yields_all_defaults() {
        let cfg: FileConfig = toml::from_str("").expect("empty config");
        assert!(cfg.global.seed.is_none());
        assert!(cfg.train.lr.is_none());
        assert!(cfg.extrapolate.opacity_floor.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<FileConfig>("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(
            err.to_string().contains("learning_rate"),
            "error should name the bad key: {err}"
        );
    }
}
