//! Experiment orchestration and on-disk artifacts.
//!
//! Every CSV has a header row, `.` decimals and `\n` line endings. Commodity
//! indices are written 1-based; realization indices are 0-based, matching
//! the seeding scheme. Aggregates are always folded in realization order, so
//! the files do not depend on the worker count.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::dynamics::{
    run_realization, RealizationSummary, Recorder, SeriesRecorder, SwitchRecorder,
};
use crate::model::StrengthRecord;
use crate::observables::{filter_lifetimes, lifetimes_from_switches, SwitchRecord};
use crate::params::Params;
use crate::rng::realization_seed;
use crate::statistics::{
    fit_power_law, guarded, log_binned_pdf, threshold_sweep, truncated_power_law_mle,
    EnsembleAccumulator, FailedRealization, LogHistogram, PowerLawFit, StatsError,
};

pub const MANIFEST_SCHEMA: &str = "manifest/1";
/// Realizations simulated concurrently per worker before results are flushed.
const CHUNK_PER_WORKER: usize = 4;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Stats { path: PathBuf, source: StatsError },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("{failed} of {total} realizations failed (limit is 10%)")]
    TooManyFailures { failed: usize, total: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_owned(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> RunError + '_ {
    move |source| RunError::Csv {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub schema: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub realization: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub code_version: String,
    pub experiment_kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub seeds: Vec<SeedEntry>,
    pub wall_time_secs: f64,
    pub files: Vec<FileEntry>,
    pub failed_realizations: Vec<FailedRealization>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    realization: u64,
    t: u64,
    v_max: f64,
    j_max: usize,
}

#[derive(Debug, Serialize)]
struct MeanRow {
    t: u64,
    mean: f64,
    stderr: f64,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    #[serde(rename = "T")]
    threshold: f64,
    #[serde(rename = "N")]
    n_agents: usize,
    mean_vmax: f64,
    mean_vmax_over_n: f64,
    stderr: f64,
}

#[derive(Debug, Serialize)]
struct LifetimeRow {
    realization: u64,
    #[serde(rename = "T")]
    threshold: f64,
    tau: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HistogramRow {
    bin_lo: f64,
    bin_hi: f64,
    center: f64,
    count: u64,
    density: f64,
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    #[serde(flatten)]
    pub fit: PowerLawFit,
    /// Maximum-likelihood exponent over the same window, when raw samples exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mle_alpha: Option<f64>,
}

/// Fails the run when more than 10% of realizations failed.
pub fn check_failure_budget(failed: usize, total: usize) -> Result<(), RunError> {
    if failed * 10 > total {
        Err(RunError::TooManyFailures { failed, total })
    } else {
        Ok(())
    }
}

fn threshold_dir(t: f64) -> String {
    format!("T{t}")
}

struct Artifacts {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Artifacts {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn csv_writer(&self, rel: &str) -> Result<csv::Writer<File>, RunError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(file))
    }

    fn finish_csv(
        &mut self,
        rel: &str,
        schema: &str,
        mut w: csv::Writer<File>,
    ) -> Result<(), RunError> {
        w.flush().map_err(io_err(&self.path(rel)))?;
        drop(w);
        self.register(rel, schema)
    }

    fn write_json<T: Serialize>(
        &mut self,
        rel: &str,
        schema: &str,
        value: &T,
    ) -> Result<(), RunError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_json_file(&path, value)?;
        self.register(rel, schema)
    }

    fn register(&mut self, rel: &str, schema: &str) -> Result<(), RunError> {
        let path = self.path(rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        self.files.push(FileEntry {
            path: rel.to_owned(),
            schema: schema.to_owned(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Runs `f` over realizations in bounded chunks, handing each result to
/// `sink` in realization order.
fn for_each_realization<T: Send>(
    p: &Params,
    workers: usize,
    f: impl Fn(&Params, u64) -> T + Sync,
    mut sink: impl FnMut(u64, Result<T, FailedRealization>) -> Result<(), RunError>,
) -> Result<(), RunError> {
    let n = p.n_realizations as u64;
    let chunk = (workers * CHUNK_PER_WORKER).max(1) as u64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let results: Vec<_> = (start..end)
            .into_par_iter()
            .map(|i| {
                guarded(|| f(p, i)).map_err(|message| FailedRealization {
                    threshold: p.threshold,
                    realization_index: i,
                    message,
                })
            })
            .collect();
        for (i, r) in (start..end).zip(results) {
            sink(i, r)?;
        }
        start = end;
    }
    Ok(())
}

fn series_of(p: &Params, i: u64) -> SeriesRecorder {
    let mut rec = SeriesRecorder::default();
    match run_realization(p, i, &mut rec) {
        Ok(_) => rec,
        Err(never) => match never {},
    }
}

fn switches_of(p: &Params, i: u64) -> SwitchRecord {
    let mut rec = SwitchRecorder::default();
    match run_realization(p, i, &mut rec) {
        Ok(_) => SwitchRecord {
            realization_index: i,
            change_times: rec.change_times,
        },
        Err(never) => match never {},
    }
}

struct Outcome {
    failed: Vec<FailedRealization>,
    warnings: Vec<String>,
    total: usize,
}

fn run_strength_series(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    art: &mut Artifacts,
) -> Result<Outcome, RunError> {
    let p = cfg.params_at(cfg.thresholds()[0]);
    let mut series = art.csv_writer("strength_series.csv")?;
    let series_path = art.path("strength_series.csv");
    let mut acc = EnsembleAccumulator::default();
    let mut failed = Vec::new();
    for_each_realization(&p, opts.workers, series_of, |i, r| {
        match r {
            Ok(rec) => {
                for (t, (&v, &j)) in rec.v_max.iter().zip(&rec.j_max).enumerate() {
                    let row = SeriesRow {
                        realization: i,
                        t: t as u64 + 1,
                        v_max: v,
                        j_max: j + 1,
                    };
                    series.serialize(row).map_err(csv_err(&series_path))?;
                }
                acc.push(&rec.v_max)
                    .expect("all realizations share the horizon");
            }
            Err(f) => failed.push(f),
        }
        Ok(())
    })?;
    art.finish_csv("strength_series.csv", "strength_series/1", series)?;

    let mut warnings = Vec::new();
    let mut mean = art.csv_writer("strength_mean.csv")?;
    let mean_path = art.path("strength_mean.csv");
    match acc.finish() {
        Ok(curve) => {
            for (t, (m, e)) in curve.mean.iter().zip(&curve.stderr).enumerate() {
                mean.serialize(MeanRow {
                    t: t as u64 + 1,
                    mean: *m,
                    stderr: *e,
                })
                .map_err(csv_err(&mean_path))?;
            }
        }
        Err(_) => warnings.push("no successful realizations; strength_mean.csv is empty".into()),
    }
    art.finish_csv("strength_mean.csv", "strength_mean/1", mean)?;
    Ok(Outcome {
        failed,
        warnings,
        total: p.n_realizations,
    })
}

fn run_sweep(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let thresholds = cfg.thresholds();
    let base = cfg.params_at(thresholds[0]);
    let result = threshold_sweep(&base, &thresholds, false);
    let n = base.n_agents as f64;
    let mut w = art.csv_writer("sweep.csv")?;
    let path = art.path("sweep.csv");
    for ((&t, &m), &e) in result
        .curve
        .abscissa
        .iter()
        .zip(&result.curve.mean)
        .zip(&result.curve.stderr)
    {
        let row = SweepRow {
            threshold: t,
            n_agents: base.n_agents,
            mean_vmax: m,
            mean_vmax_over_n: m / n,
            stderr: e / n,
        };
        w.serialize(row).map_err(csv_err(&path))?;
    }
    art.finish_csv("sweep.csv", "sweep/1", w)?;
    let warnings = result
        .failures
        .iter()
        .map(|(t, e)| format!("T = {t} skipped: {e}"))
        .collect();
    Ok(Outcome {
        failed: result.failed_realizations,
        warnings,
        total: base.n_realizations * thresholds.len(),
    })
}

fn run_lifetimes(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    art: &mut Artifacts,
) -> Result<Outcome, RunError> {
    let thresholds = cfg.thresholds();
    let mut lifetimes = art.csv_writer("lifetimes.csv")?;
    let lifetimes_path = art.path("lifetimes.csv");
    let mut failed = Vec::new();
    let mut warnings = Vec::new();
    let mut per_threshold = Vec::new();
    for &t in &thresholds {
        let p = cfg.params_at(t);
        let mut taus = Vec::new();
        for_each_realization(&p, opts.workers, switches_of, |_, r| {
            match r {
                Ok(rec) => {
                    let kept = filter_lifetimes(
                        &lifetimes_from_switches(&rec, t),
                        p.lifetime_low_cutoff,
                        p.lifetime_high_cutoff,
                    );
                    for s in kept {
                        let row = LifetimeRow {
                            realization: s.realization_index,
                            threshold: t,
                            tau: s.tau,
                        };
                        lifetimes.serialize(row).map_err(csv_err(&lifetimes_path))?;
                        taus.push(s.tau as f64);
                    }
                }
                Err(f) => failed.push(f),
            }
            Ok(())
        })?;
        per_threshold.push((t, p, taus));
    }
    art.finish_csv("lifetimes.csv", "lifetimes/1", lifetimes)?;

    let window = cfg.fit_window();
    for (t, p, taus) in per_threshold {
        let dir = threshold_dir(t);
        let range = (p.lifetime_low_cutoff as f64, p.lifetime_high_cutoff as f64);
        let hist = match log_binned_pdf(&taus, cfg.bins_per_decade, range) {
            Ok(h) => h,
            Err(e) => {
                warnings.push(format!("T = {t}: no histogram ({e})"));
                continue;
            }
        };
        let rel = format!("{dir}/histogram.csv");
        write_histogram(art, &rel, &hist)?;
        match fit_power_law(&hist, window) {
            Ok(fit) => {
                let mle_alpha = truncated_power_law_mle(&taus, window.0, window.1);
                art.write_json(
                    &format!("{dir}/fit.json"),
                    "fit/1",
                    &FitFile { fit, mle_alpha },
                )?;
            }
            Err(e) => warnings.push(format!("T = {t}: no fit ({e})")),
        }
    }
    Ok(Outcome {
        failed,
        warnings,
        total: cfg.params.n_realizations * thresholds.len(),
    })
}

fn write_histogram(art: &mut Artifacts, rel: &str, h: &LogHistogram) -> Result<(), RunError> {
    let mut w = art.csv_writer(rel)?;
    let path = art.path(rel);
    for i in 0..h.n_bins() {
        let row = HistogramRow {
            bin_lo: h.bin_edges[i],
            bin_hi: h.bin_edges[i + 1],
            center: h.center(i),
            count: h.counts[i],
            density: h.density[i],
        };
        w.serialize(row).map_err(csv_err(&path))?;
    }
    art.finish_csv(rel, "histogram/1", w)
}

/// Runs the configured experiment and writes its artifacts plus
/// `manifest.json` into `opts.out_dir`. On too many failed realizations the
/// manifest is still written before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Manifest, RunError> {
    let started = Instant::now();
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let mut art = Artifacts {
        root: opts.out_dir.clone(),
        files: Vec::new(),
    };
    let outcome = pool.install(|| match cfg.experiment_kind {
        ExperimentKind::StrengthSeries => run_strength_series(cfg, opts, &mut art),
        ExperimentKind::ThresholdSweep => run_sweep(cfg, &mut art),
        ExperimentKind::Lifetimes => run_lifetimes(cfg, opts, &mut art),
    })?;

    let seed_base = cfg.params.base_seed;
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        experiment_kind: cfg.experiment_kind,
        config: cfg.clone(),
        output_dir: opts.out_dir.clone(),
        workers: opts.workers,
        seeds: (0..cfg.params.n_realizations as u64)
            .map(|i| SeedEntry {
                realization: i,
                seed: realization_seed(seed_base, i),
            })
            .collect(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        files: art.files,
        failed_realizations: outcome.failed,
        warnings: outcome.warnings,
    };
    write_json_file(&opts.out_dir.join("manifest.json"), &manifest)?;
    check_failure_budget(manifest.failed_realizations.len(), outcome.total)?;
    Ok(manifest)
}

/// Reads a `histogram.csv` written by [`run_experiment`].
pub fn read_histogram(path: &Path) -> Result<LogHistogram, RunError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for row in r.deserialize::<HistogramRow>() {
        let row = row.map_err(csv_err(path))?;
        rows.push((row.bin_lo, row.bin_hi, row.count, row.density));
    }
    LogHistogram::from_rows(&rows).map_err(|source| RunError::Stats {
        path: path.to_owned(),
        source,
    })
}

/// Re-fits an existing histogram over a new window.
pub fn refit_histogram(path: &Path, window: (f64, f64)) -> Result<PowerLawFit, RunError> {
    let h = read_histogram(path)?;
    fit_power_law(&h, window).map_err(|source| RunError::Stats {
        path: path.to_owned(),
        source,
    })
}

struct CsvStream<W: Write> {
    out: csv::Writer<W>,
    realization: u64,
}

impl<W: Write> Recorder for CsvStream<W> {
    type Error = csv::Error;

    fn record(&mut self, rec: &StrengthRecord) -> Result<(), Self::Error> {
        self.out.serialize(SeriesRow {
            realization: self.realization,
            t: rec.t,
            v_max: rec.v_max,
            j_max: rec.j_max + 1,
        })
    }
}

/// Streams one realization's per-turn strength records as CSV.
pub fn stream_realization<W: Write>(
    p: &Params,
    realization: u64,
    out: W,
) -> Result<RealizationSummary, csv::Error> {
    let writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(out));
    let mut stream = CsvStream {
        out: writer,
        realization,
    };
    let summary = run_realization(p, realization, &mut stream)?;
    stream.out.flush()?;
    Ok(summary)
}
