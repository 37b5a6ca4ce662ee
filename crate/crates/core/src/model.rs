//! Market state and per-turn observation records.
//!
//! Indices are 0-based in memory. Agent `k` is the sole producer of
//! commodity `k`. Portfolios and views are stored agent-major so that one
//! agent's row is a contiguous slice of length `M`.

use serde::{Deserialize, Serialize};

use crate::params::{Params, DEFAULT_IMITATION_GAIN, DEFAULT_VIEW_INCREMENT};
use crate::rng::RandomStream;

#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub t: u64,
    n_agents: usize,
    n_commodities: usize,
    /// `portfolio[k * M + j]`: units of commodity `j` held by agent `k`.
    portfolio: Vec<u32>,
    /// `views[k * M + j]`: agent `k`'s view on commodity `j`, in `[1, M]`.
    views: Vec<f64>,
    /// `wants[k]`: the commodity agent `k` individually demands; never `k`.
    wants: Vec<usize>,
    threshold: f64,
    view_increment: f64,
    imitation_gain: f64,
}

/// Macroscopic observables sampled at the end of a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthRecord {
    pub t: u64,
    pub strength: Vec<f64>,
    pub v_max: f64,
    /// 0-based commodity index; written 1-based in output files.
    pub j_max: usize,
}

/// Initial condition: one unit of own product per agent, all views at 1,
/// wants drawn uniformly from the non-self commodities (agent order 0..N).
pub fn init_state(p: &Params, stream: &mut RandomStream) -> MarketState {
    let n = p.n_agents;
    let m = p.n_commodities;
    let mut portfolio = vec![0u32; n * m];
    for k in 0..n {
        portfolio[k * m + k] = 1;
    }
    let wants = (0..n).map(|k| stream.index_below_except(m, k)).collect();
    MarketState {
        t: 0,
        n_agents: n,
        n_commodities: m,
        portfolio,
        views: vec![1.0; n * m],
        wants,
        threshold: p.threshold,
        view_increment: p.view_increment,
        imitation_gain: p.imitation_gain,
    }
}

impl MarketState {
    /// Builds a state from explicit contents with the default view-update
    /// rates. Rows are indexed `[agent][commodity]`.
    pub fn from_parts(
        threshold: f64,
        portfolio: Vec<Vec<u32>>,
        views: Vec<Vec<f64>>,
        wants: Vec<usize>,
    ) -> Self {
        let n = portfolio.len();
        let m = portfolio.first().map_or(0, Vec::len);
        assert_eq!(views.len(), n);
        assert_eq!(wants.len(), n);
        assert!(portfolio.iter().all(|r| r.len() == m));
        assert!(views.iter().all(|r| r.len() == m));
        MarketState {
            t: 0,
            n_agents: n,
            n_commodities: m,
            portfolio: portfolio.into_iter().flatten().collect(),
            views: views.into_iter().flatten().collect(),
            wants,
            threshold,
            view_increment: DEFAULT_VIEW_INCREMENT,
            imitation_gain: DEFAULT_IMITATION_GAIN,
        }
    }

    pub fn with_rates(mut self, view_increment: f64, imitation_gain: f64) -> Self {
        self.view_increment = view_increment;
        self.imitation_gain = imitation_gain;
        self
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_commodities(&self) -> usize {
        self.n_commodities
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn view_increment(&self) -> f64 {
        self.view_increment
    }

    pub fn imitation_gain(&self) -> f64 {
        self.imitation_gain
    }

    pub fn held(&self, j: usize, k: usize) -> u32 {
        self.portfolio[k * self.n_commodities + j]
    }

    pub fn view(&self, j: usize, k: usize) -> f64 {
        self.views[k * self.n_commodities + j]
    }

    pub fn want(&self, k: usize) -> usize {
        self.wants[k]
    }

    pub fn wants(&self) -> &[usize] {
        &self.wants
    }

    pub fn holdings_of(&self, k: usize) -> &[u32] {
        let m = self.n_commodities;
        &self.portfolio[k * m..(k + 1) * m]
    }

    pub fn views_of(&self, k: usize) -> &[f64] {
        let m = self.n_commodities;
        &self.views[k * m..(k + 1) * m]
    }

    /// Mutable view rows of two distinct agents.
    pub(crate) fn view_pair_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert_ne!(a, b);
        let m = self.n_commodities;
        let (lo, hi, swapped) = if a < b { (a, b, false) } else { (b, a, true) };
        let (head, tail) = self.views.split_at_mut(hi * m);
        let lo_row = &mut head[lo * m..(lo + 1) * m];
        let hi_row = &mut tail[..m];
        if swapped {
            (hi_row, lo_row)
        } else {
            (lo_row, hi_row)
        }
    }

    pub(crate) fn held_mut(&mut self, j: usize, k: usize) -> &mut u32 {
        &mut self.portfolio[k * self.n_commodities + j]
    }

    pub(crate) fn set_want(&mut self, k: usize, j: usize) {
        debug_assert_ne!(j, k);
        self.wants[k] = j;
    }

    /// Total units of commodity `j` across all agents.
    pub fn total_of(&self, j: usize) -> u64 {
        (0..self.n_agents).map(|k| self.held(j, k) as u64).sum()
    }

    /// Returns the first violated state invariant, if any.
    pub fn check_invariants(&self) -> Result<(), String> {
        let upper = self.n_commodities as f64;
        for k in 0..self.n_agents {
            for (j, &v) in self.views_of(k).iter().enumerate() {
                if !(1.0..=upper).contains(&v) {
                    return Err(format!("view V({j},{k}) = {v} outside [1, {upper}]"));
                }
            }
            if self.wants[k] == k || self.wants[k] >= self.n_commodities {
                return Err(format!("agent {k} has invalid want {}", self.wants[k]));
            }
        }
        Ok(())
    }
}
