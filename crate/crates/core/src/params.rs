//! Immutable experiment parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lifetimes shorter than this many turns are treated as transient money states.
pub const DEFAULT_LOW_CUTOFF: u64 = 10;
/// Lifetimes longer than this many turns are dropped to avoid finite-horizon artefacts.
pub const DEFAULT_HIGH_CUTOFF: u64 = 100_000;
/// Added to an unsatisfied agent's view on its own want.
pub const DEFAULT_VIEW_INCREMENT: f64 = 0.25;
/// Fraction of a partner's excess view (above 1) that an unsatisfied agent
/// adopts for each commodity the partner values at or above the threshold.
pub const DEFAULT_IMITATION_GAIN: f64 = 0.03;

fn default_view_increment() -> f64 {
    DEFAULT_VIEW_INCREMENT
}

fn default_imitation_gain() -> f64 {
    DEFAULT_IMITATION_GAIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub n_agents: usize,
    pub n_commodities: usize,
    pub threshold: f64,
    pub turns_horizon: u64,
    pub n_realizations: usize,
    pub base_seed: u64,
    pub lifetime_low_cutoff: u64,
    pub lifetime_high_cutoff: u64,
    #[serde(default = "default_view_increment")]
    pub view_increment: f64,
    #[serde(default = "default_imitation_gain")]
    pub imitation_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("n_agents must be at least 2, got {0}")]
    TooFewAgents(usize),
    #[error("n_commodities ({commodities}) must be at least n_agents ({agents})")]
    TooFewCommodities { agents: usize, commodities: usize },
    #[error("threshold must be a finite value >= 1, got {0}")]
    ThresholdBelowOne(f64),
    #[error("turns_horizon must be positive")]
    ZeroHorizon,
    #[error("n_realizations must be positive")]
    ZeroRealizations,
    #[error("lifetime_low_cutoff must be positive")]
    ZeroLowCutoff,
    #[error("lifetime cutoffs out of order: low {low} must be below high {high}")]
    CutoffOrder { low: u64, high: u64 },
    #[error("view_increment must be finite and positive, got {0}")]
    BadViewIncrement(f64),
    #[error("imitation_gain must be finite and non-negative, got {0}")]
    BadImitationGain(f64),
}

impl Params {
    /// Parameters with `M = N` and the default lifetime cutoffs.
    pub fn new(n_agents: usize, threshold: f64, turns_horizon: u64, n_realizations: usize) -> Self {
        Params {
            n_agents,
            n_commodities: n_agents,
            threshold,
            turns_horizon,
            n_realizations,
            base_seed: 0,
            lifetime_low_cutoff: DEFAULT_LOW_CUTOFF,
            lifetime_high_cutoff: DEFAULT_HIGH_CUTOFF,
            view_increment: DEFAULT_VIEW_INCREMENT,
            imitation_gain: DEFAULT_IMITATION_GAIN,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(self) -> Result<Self, ParamsError> {
        if self.n_agents <= 1 {
            return Err(ParamsError::TooFewAgents(self.n_agents));
        }
        if self.n_commodities < self.n_agents {
            return Err(ParamsError::TooFewCommodities {
                agents: self.n_agents,
                commodities: self.n_commodities,
            });
        }
        if !self.threshold.is_finite() || self.threshold < 1.0 {
            return Err(ParamsError::ThresholdBelowOne(self.threshold));
        }
        if self.turns_horizon == 0 {
            return Err(ParamsError::ZeroHorizon);
        }
        if self.n_realizations == 0 {
            return Err(ParamsError::ZeroRealizations);
        }
        if self.lifetime_low_cutoff == 0 {
            return Err(ParamsError::ZeroLowCutoff);
        }
        if self.lifetime_low_cutoff >= self.lifetime_high_cutoff {
            return Err(ParamsError::CutoffOrder {
                low: self.lifetime_low_cutoff,
                high: self.lifetime_high_cutoff,
            });
        }
        if !(self.view_increment > 0.0 && self.view_increment.is_finite()) {
            return Err(ParamsError::BadViewIncrement(self.view_increment));
        }
        if !(self.imitation_gain >= 0.0 && self.imitation_gain.is_finite()) {
            return Err(ParamsError::BadImitationGain(self.imitation_gain));
        }
        Ok(self)
    }
}

pub fn validate_params(p: Params) -> Result<Params, ParamsError> {
    p.validate()
}
