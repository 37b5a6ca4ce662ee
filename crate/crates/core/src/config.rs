//! Experiment configuration files (TOML).
//!
//! ```toml
//! experiment_kind = "lifetimes"
//! thresholds = [2.0, 2.5, 3.0]
//! output_dir = "out/fig4"
//!
//! [params]
//! n_agents = 50
//! turns_horizon = 100000
//! n_realizations = 20
//! ```
//!
//! Defaults: `n_commodities = n_agents`, `base_seed = 0`, lifetime cutoffs
//! 10 and 100000, `bins_per_decade = 8`, fit window from 1000 to the upper
//! cutoff, `workers` = available parallelism.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{
    Params, ParamsError, DEFAULT_HIGH_CUTOFF, DEFAULT_IMITATION_GAIN, DEFAULT_LOW_CUTOFF,
    DEFAULT_VIEW_INCREMENT,
};
use crate::statistics::{DEFAULT_BINS_PER_DECADE, DEFAULT_FIT_LOW};

/// Environment variable overriding the configured worker count.
pub const WORKERS_ENV: &str = "MONETA_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    StrengthSeries,
    ThresholdSweep,
    Lifetimes,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::StrengthSeries => "strength-series",
            ExperimentKind::ThresholdSweep => "threshold-sweep",
            ExperimentKind::Lifetimes => "lifetimes",
        }
    }
}

/// Model parameters as written in a config file. `threshold` is per-kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub n_agents: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_commodities: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub turns_horizon: u64,
    pub n_realizations: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_low")]
    pub lifetime_low_cutoff: u64,
    #[serde(default = "default_high")]
    pub lifetime_high_cutoff: u64,
    #[serde(default = "default_increment")]
    pub view_increment: f64,
    #[serde(default = "default_gain")]
    pub imitation_gain: f64,
}

fn default_low() -> u64 {
    DEFAULT_LOW_CUTOFF
}
fn default_high() -> u64 {
    DEFAULT_HIGH_CUTOFF
}
fn default_increment() -> f64 {
    DEFAULT_VIEW_INCREMENT
}
fn default_gain() -> f64 {
    DEFAULT_IMITATION_GAIN
}
fn default_bins() -> u32 {
    DEFAULT_BINS_PER_DECADE
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_kind: ExperimentKind,
    pub params: ParamsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_bins")]
    pub bins_per_decade: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<[f64; 2]>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{kind} experiments require `{field}`")]
    Missing {
        kind: &'static str,
        field: &'static str,
    },
    #[error("`{field}` is not allowed for {kind} experiments")]
    NotAllowed {
        kind: &'static str,
        field: &'static str,
    },
    #[error("lifetimes experiments take either `params.threshold` or `thresholds`, not both")]
    BothThresholds,
    #[error("`thresholds` must not be empty")]
    EmptyThresholds,
    #[error("invalid parameters at T = {threshold}: {source}")]
    Params { threshold: f64, source: ParamsError },
    #[error("workers must be at least 1")]
    ZeroWorkers,
    #[error("invalid {WORKERS_ENV} value {0:?}")]
    BadWorkersEnv(String),
    #[error("bins_per_decade must be at least 1")]
    ZeroBins,
    #[error("fit_window [{0}, {1}] must satisfy 0 < low < high")]
    BadFitWindow(f64, f64),
}

impl ExperimentConfig {
    /// Thresholds the experiment runs at, in configured order.
    pub fn thresholds(&self) -> Vec<f64> {
        match (&self.thresholds, self.params.threshold) {
            (Some(ts), _) => ts.clone(),
            (None, Some(t)) => vec![t],
            (None, None) => Vec::new(),
        }
    }

    pub fn params_at(&self, threshold: f64) -> Params {
        let s = &self.params;
        Params {
            n_agents: s.n_agents,
            n_commodities: s.n_commodities.unwrap_or(s.n_agents),
            threshold,
            turns_horizon: s.turns_horizon,
            n_realizations: s.n_realizations,
            base_seed: s.base_seed,
            lifetime_low_cutoff: s.lifetime_low_cutoff,
            lifetime_high_cutoff: s.lifetime_high_cutoff,
            view_increment: s.view_increment,
            imitation_gain: s.imitation_gain,
        }
    }

    pub fn fit_window(&self) -> (f64, f64) {
        match self.fit_window {
            Some([lo, hi]) => (lo, hi),
            None => (DEFAULT_FIT_LOW, self.params.lifetime_high_cutoff as f64),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let kind = self.experiment_kind.as_str();
        let has_t = self.params.threshold.is_some();
        match (self.experiment_kind, has_t, &self.thresholds) {
            (ExperimentKind::StrengthSeries, _, Some(_)) => {
                return Err(ConfigError::NotAllowed {
                    kind,
                    field: "thresholds",
                })
            }
            (ExperimentKind::StrengthSeries, false, None) => {
                return Err(ConfigError::Missing {
                    kind,
                    field: "params.threshold",
                })
            }
            (ExperimentKind::ThresholdSweep, true, _) => {
                return Err(ConfigError::NotAllowed {
                    kind,
                    field: "params.threshold",
                })
            }
            (ExperimentKind::ThresholdSweep, false, None) => {
                return Err(ConfigError::Missing {
                    kind,
                    field: "thresholds",
                })
            }
            (ExperimentKind::Lifetimes, true, Some(_)) => return Err(ConfigError::BothThresholds),
            (ExperimentKind::Lifetimes, false, None) => {
                return Err(ConfigError::Missing {
                    kind,
                    field: "thresholds",
                })
            }
            _ => {}
        }
        if self.experiment_kind != ExperimentKind::Lifetimes && self.fit_window.is_some() {
            return Err(ConfigError::NotAllowed {
                kind,
                field: "fit_window",
            });
        }
        if self.thresholds.as_ref().is_some_and(Vec::is_empty) {
            return Err(ConfigError::EmptyThresholds);
        }
        for t in self.thresholds() {
            self.params_at(t)
                .validate()
                .map_err(|source| ConfigError::Params {
                    threshold: t,
                    source,
                })?;
        }
        if self.workers == Some(0) {
            return Err(ConfigError::ZeroWorkers);
        }
        if self.bins_per_decade == 0 {
            return Err(ConfigError::ZeroBins);
        }
        let (lo, hi) = self.fit_window();
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(ConfigError::BadFitWindow(lo, hi));
        }
        Ok(())
    }
}

/// Parses and validates a TOML experiment description.
pub fn parse_config(source: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig =
        toml::from_str(source).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_config(&text)
}

/// Worker count: explicit request, then `MONETA_WORKERS`, then the config,
/// then the machine's available parallelism.
pub fn resolve_workers(
    requested: Option<usize>,
    cfg: &ExperimentConfig,
) -> Result<usize, ConfigError> {
    let env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| ConfigError::BadWorkersEnv(v))?,
        ),
        Err(_) => None,
    };
    let n = requested
        .or(env)
        .or(cfg.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(ConfigError::ZeroWorkers);
    }
    Ok(n)
}
