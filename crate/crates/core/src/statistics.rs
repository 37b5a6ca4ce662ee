//! Ensemble aggregation, log-binned densities and power-law fitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{run_realization, NullRecorder};
use crate::params::{Params, ParamsError};

pub const DEFAULT_BINS_PER_DECADE: u32 = 8;
/// Lower edge of the default power-law fit window, in turns.
pub const DEFAULT_FIT_LOW: f64 = 1_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no input series")]
    EmptyEnsemble,
    #[error("series {index} has length {len}, expected {expected}")]
    Ragged {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("no samples to histogram")]
    EmptySample,
    #[error("invalid histogram window [{lo}, {hi}]")]
    BadWindow { lo: f64, hi: f64 },
    #[error("bins_per_decade must be at least 1")]
    ZeroBins,
    #[error("sample {value} lies outside the window [{lo}, {hi}]")]
    OutOfWindow { value: f64, lo: f64, hi: f64 },
    #[error("need at least 3 non-empty bins in the fit window, found {0}")]
    TooFewBins(usize),
    #[error("fit abscissa has zero variance")]
    Degenerate,
    #[error("malformed histogram: {0}")]
    Malformed(String),
}

/// Mean and standard error per abscissa point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCurve {
    pub abscissa: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: usize,
}

/// Sample mean and standard error of the mean (zero for a single sample).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Streaming per-turn mean and variance (Welford). Series must be pushed in
/// a fixed order for bit-reproducible results.
#[derive(Debug, Clone, Default)]
pub struct EnsembleAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl EnsembleAccumulator {
    pub fn push(&mut self, series: &[f64]) -> Result<(), StatsError> {
        if self.n == 0 {
            self.mean = vec![0.0; series.len()];
            self.m2 = vec![0.0; series.len()];
        } else if series.len() != self.mean.len() {
            return Err(StatsError::Ragged {
                index: self.n,
                len: series.len(),
                expected: self.mean.len(),
            });
        }
        self.n += 1;
        let n = self.n as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(series) {
            let d = x - *m;
            *m += d / n;
            *m2 += d * (x - *m);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(self) -> Result<EnsembleCurve, StatsError> {
        if self.n == 0 {
            return Err(StatsError::EmptyEnsemble);
        }
        let n = self.n as f64;
        let stderr = self
            .m2
            .iter()
            .map(|&m2| {
                if self.n < 2 {
                    0.0
                } else {
                    (m2 / (n - 1.0) / n).sqrt()
                }
            })
            .collect();
        Ok(EnsembleCurve {
            abscissa: (1..=self.mean.len()).map(|t| t as f64).collect(),
            mean: self.mean,
            stderr,
            n: self.n,
        })
    }
}

/// Per-turn mean across realizations. Entry `i` of each series is turn `i + 1`.
pub fn ensemble_mean_series(trajectories: &[Vec<f64>]) -> Result<EnsembleCurve, StatsError> {
    let mut acc = EnsembleAccumulator::default();
    for s in trajectories {
        acc.push(s)?;
    }
    acc.finish()
}

/// A realization that panicked; it is excluded from every aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRealization {
    pub threshold: f64,
    pub realization_index: u64,
    pub message: String,
}

/// Runs `f`, turning a panic into an error message.
pub fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| e.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "realization panicked".into())
    })
}

/// Runs `f` for realizations `0..p.n_realizations` on the current rayon
/// pool. Results come back ordered by realization index.
pub fn run_ensemble<T: Send>(
    p: &Params,
    f: impl Fn(&Params, u64) -> T + Sync,
) -> Vec<Result<T, FailedRealization>> {
    (0..p.n_realizations as u64)
        .into_par_iter()
        .map(|i| {
            guarded(|| f(p, i)).map_err(|message| FailedRealization {
                threshold: p.threshold,
                realization_index: i,
                message,
            })
        })
        .collect()
}

/// Outcome of a threshold sweep. Grid points whose parameters fail
/// validation are reported in `failures` and left out of `curve`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub curve: EnsembleCurve,
    pub failures: Vec<(f64, ParamsError)>,
    pub failed_realizations: Vec<FailedRealization>,
}

fn final_vmax(p: &Params, i: u64) -> f64 {
    match run_realization(p, i, &mut NullRecorder) {
        Ok(summary) => summary.final_v_max,
        Err(never) => match never {},
    }
}

/// Mean final money strength versus threshold. With `scale_by_n`, means and
/// errors are divided by the number of agents.
pub fn threshold_sweep(p_base: &Params, thresholds: &[f64], scale_by_n: bool) -> SweepResult {
    let mut curve = EnsembleCurve {
        abscissa: Vec::new(),
        mean: Vec::new(),
        stderr: Vec::new(),
        n: p_base.n_realizations,
    };
    let mut failures = Vec::new();
    let mut failed_realizations = Vec::new();
    let scale = if scale_by_n {
        p_base.n_agents as f64
    } else {
        1.0
    };
    for &t in thresholds {
        match p_base.clone().with_threshold(t).validate() {
            Ok(p) => {
                let mut ok = Vec::with_capacity(p.n_realizations);
                for r in run_ensemble(&p, final_vmax) {
                    match r {
                        Ok(v) => ok.push(v / scale),
                        Err(f) => failed_realizations.push(f),
                    }
                }
                if ok.is_empty() {
                    continue;
                }
                let (m, e) = mean_stderr(&ok);
                curve.abscissa.push(t);
                curve.mean.push(m);
                curve.stderr.push(e);
            }
            Err(err) => failures.push((t, err)),
        }
    }
    SweepResult {
        curve,
        failures,
        failed_realizations,
    }
}

/// Histogram on geometrically spaced bins with density per unit abscissa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub density: Vec<f64>,
}

impl LogHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self, i: usize) -> f64 {
        self.bin_edges[i + 1] - self.bin_edges[i]
    }

    /// Geometric mean of the bin edges.
    pub fn center(&self, i: usize) -> f64 {
        (self.bin_edges[i] * self.bin_edges[i + 1]).sqrt()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Rebuilds a histogram from per-bin `(lo, hi, count, density)` rows as
    /// stored on disk. Adjacent bins must share edges.
    pub fn from_rows(rows: &[(f64, f64, u64, f64)]) -> Result<Self, StatsError> {
        if rows.is_empty() {
            return Err(StatsError::Malformed("no bins".into()));
        }
        let mut bin_edges = vec![rows[0].0];
        for (i, &(lo, hi, _, _)) in rows.iter().enumerate() {
            if hi.is_nan() || lo.is_nan() || hi <= lo {
                return Err(StatsError::Malformed(format!("bin {i} has hi <= lo")));
            }
            let prev = *bin_edges.last().unwrap();
            if (lo - prev).abs() > 1e-9 * prev.abs().max(1.0) {
                return Err(StatsError::Malformed(format!(
                    "bin {i} does not start at previous edge"
                )));
            }
            bin_edges.push(hi);
        }
        Ok(LogHistogram {
            bin_edges,
            counts: rows.iter().map(|r| r.2).collect(),
            density: rows.iter().map(|r| r.3).collect(),
        })
    }
}

fn geometric_edges(lo: f64, hi: f64, bins_per_decade: u32) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let raw = decades * bins_per_decade as f64;
    // Window spans an integral number of bins up to rounding noise.
    let n = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    } as usize;
    let n = n.max(1);
    let mut edges: Vec<f64> = (0..n)
        .map(|i| lo * 10f64.powf(i as f64 / bins_per_decade as f64))
        .collect();
    edges.push(hi);
    edges
}

/// Log-binned probability density of `samples` over `[lo, hi]`.
pub fn log_binned_pdf(
    samples: &[f64],
    bins_per_decade: u32,
    window: (f64, f64),
) -> Result<LogHistogram, StatsError> {
    let (lo, hi) = window;
    if bins_per_decade == 0 {
        return Err(StatsError::ZeroBins);
    }
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(StatsError::BadWindow { lo, hi });
    }
    if samples.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let edges = geometric_edges(lo, hi, bins_per_decade);
    let n_bins = edges.len() - 1;
    let mut counts = vec![0u64; n_bins];
    for &x in samples {
        if !(lo..=hi).contains(&x) {
            return Err(StatsError::OutOfWindow { value: x, lo, hi });
        }
        // partition_point gives the first edge strictly above x.
        let i = edges
            .partition_point(|&e| e <= x)
            .saturating_sub(1)
            .min(n_bins - 1);
        counts[i] += 1;
    }
    let total = samples.len() as f64;
    let density = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 / (total * (edges[i + 1] - edges[i])))
        .collect();
    Ok(LogHistogram {
        bin_edges: edges,
        counts,
        density,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub alpha: f64,
    pub alpha_stderr: f64,
    pub window: (f64, f64),
    pub n_bins_used: usize,
}

impl PowerLawFit {
    pub fn density_at(&self, tau: f64) -> f64 {
        self.amplitude * tau.powf(-self.alpha)
    }
}

/// Least-squares line through `(log10 center, log10 density)` of the
/// non-empty bins whose centers fall inside `fit_window`.
pub fn fit_power_law(h: &LogHistogram, fit_window: (f64, f64)) -> Result<PowerLawFit, StatsError> {
    let (lo, hi) = fit_window;
    if !(lo > 0.0 && hi > lo) {
        return Err(StatsError::BadWindow { lo, hi });
    }
    let points: Vec<(f64, f64)> = (0..h.n_bins())
        .filter(|&i| h.density[i] > 0.0)
        .map(|i| (h.center(i), h.density[i]))
        .filter(|&(c, _)| c >= lo && c <= hi)
        .map(|(c, d)| (c.log10(), d.log10()))
        .collect();
    let n = points.len();
    if n < 3 {
        return Err(StatsError::TooFewBins(n));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * nf {
        return Err(StatsError::Degenerate);
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let slope_stderr = (ssr / (nf - 2.0) / sxx).sqrt();
    Ok(PowerLawFit {
        amplitude: 10f64.powf(intercept),
        alpha: -slope,
        alpha_stderr: slope_stderr,
        window: fit_window,
        n_bins_used: n,
    })
}

/// `ln` of the normalizer of `x^-alpha` on `[lo, hi]`.
fn ln_truncated_norm(alpha: f64, lo: f64, hi: f64) -> f64 {
    let s = 1.0 - alpha;
    if s.abs() < 1e-9 {
        return (hi / lo).ln().ln();
    }
    // (hi^s - lo^s) / s, evaluated in log space relative to the larger term.
    let (a, b) = (s * hi.ln(), s * lo.ln());
    let top = a.max(b);
    let diff = ((a - top).exp() - (b - top).exp()).abs();
    top + diff.ln() - s.abs().ln()
}

/// Maximum-likelihood exponent of a power-law density truncated to
/// `[lo, hi]`. Samples outside the window are ignored. Returns `None` with
/// fewer than two usable samples.
pub fn truncated_power_law_mle(samples: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let logs: Vec<f64> = samples
        .iter()
        .filter(|&&x| x >= lo && x <= hi)
        .map(|x| x.ln())
        .collect();
    if logs.len() < 2 || hi.is_nan() || hi <= lo {
        return None;
    }
    let n = logs.len() as f64;
    let sum_ln = logs.iter().sum::<f64>();
    // Concave log-likelihood; golden-section search on a wide bracket.
    let loglik = |a: f64| -n * ln_truncated_norm(a, lo, hi) - a * sum_ln;
    let (mut a, mut b) = (-5.0f64, 10.0f64);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (loglik(c), loglik(d));
    for _ in 0..200 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = loglik(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = loglik(d);
        }
        if b - a < 1e-10 {
            break;
        }
    }
    Some(0.5 * (a + b))
}
