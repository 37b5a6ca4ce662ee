//! Commodity strength, money strength, money switching and money lifetimes.

use serde::{Deserialize, Serialize};

use crate::model::{MarketState, StrengthRecord};

/// Turns at which the commodity-money changes within one realization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub realization_index: u64,
    /// Strictly increasing turn indices, 1-based turn numbering.
    pub change_times: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifetimeSample {
    pub tau: u64,
    pub realization_index: u64,
    pub threshold: f64,
}

/// Agent-averaged view on commodity `j`.
pub fn commodity_strength(state: &MarketState, j: usize) -> f64 {
    let n = state.n_agents();
    (0..n).map(|k| state.view(j, k)).sum::<f64>() / n as f64
}

/// All commodity strengths, accumulated agent by agent (same summation
/// order as [`commodity_strength`]).
pub fn strengths(state: &MarketState) -> Vec<f64> {
    let mut out = vec![0.0; state.n_commodities()];
    accumulate_strengths(state, &mut out);
    out
}

fn accumulate_strengths(state: &MarketState, out: &mut [f64]) {
    out.fill(0.0);
    for k in 0..state.n_agents() {
        for (acc, v) in out.iter_mut().zip(state.views_of(k)) {
            *acc += v;
        }
    }
    let n = state.n_agents() as f64;
    for acc in out.iter_mut() {
        *acc /= n;
    }
}

/// Maximum and lowest maximizing index of a strength vector.
pub fn argmax_lowest(values: &[f64]) -> (f64, usize) {
    let mut best = (values[0], 0);
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, j);
        }
    }
    best
}

/// `(V_max, j_max)`: the strongest commodity, lowest index on ties.
pub fn money_strength(state: &MarketState) -> (f64, usize) {
    argmax_lowest(&strengths(state))
}

pub(crate) fn fill_strength_record(state: &MarketState, rec: &mut StrengthRecord) {
    accumulate_strengths(state, &mut rec.strength);
    let (v, j) = argmax_lowest(&rec.strength);
    rec.t = state.t;
    rec.v_max = v;
    rec.j_max = j;
}

/// Builds a full [`StrengthRecord`] for the state's current turn.
pub fn strength_record(state: &MarketState) -> StrengthRecord {
    let mut rec = StrengthRecord {
        t: state.t,
        strength: vec![0.0; state.n_commodities()],
        v_max: 0.0,
        j_max: 0,
    };
    fill_strength_record(state, &mut rec);
    rec
}

/// Change times of a per-turn `j_max` series whose first entry is turn 1.
pub fn detect_switches(jmax_series: &[usize], realization_index: u64) -> SwitchRecord {
    let change_times = jmax_series
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(i, _)| i as u64 + 2)
        .collect();
    SwitchRecord {
        realization_index,
        change_times,
    }
}

/// Consecutive differences of the change times. Dominance segments before
/// the first and after the last change are censored and never appear.
pub fn lifetimes_from_switches(rec: &SwitchRecord, threshold: f64) -> Vec<LifetimeSample> {
    rec.change_times
        .windows(2)
        .map(|w| LifetimeSample {
            tau: w[1] - w[0],
            realization_index: rec.realization_index,
            threshold,
        })
        .collect()
}

/// Keeps samples with `low <= tau <= high`, preserving order.
pub fn filter_lifetimes(samples: &[LifetimeSample], low: u64, high: u64) -> Vec<LifetimeSample> {
    samples
        .iter()
        .filter(|s| (low..=high).contains(&s.tau))
        .copied()
        .collect()
}
