use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moneta_core::config::{load_config, resolve_workers, ExperimentConfig, ExperimentKind};
use moneta_core::runner::{self, FitFile, RunOptions};

#[derive(Parser)]
#[command(
    name = "moneta",
    version,
    about = "Commodity-money emergence simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one realization and stream per-turn strength records as CSV.
    Run {
        #[command(flatten)]
        common: Common,
        /// Realization index (selects the random stream).
        #[arg(long, default_value_t = 0)]
        realization: u64,
        /// Threshold to use when the config lists several.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run a strength-series experiment.
    Series(Common),
    /// Run a threshold-sweep experiment.
    Sweep(Common),
    /// Run a lifetimes experiment.
    Lifetimes(Common),
    /// Re-fit an existing histogram.csv over a new window.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        /// Fit window as LOW:HIGH, e.g. 1e3:1e5.
        #[arg(long, value_parser = parse_window)]
        window: (f64, f64),
        /// Output path for fit.json (default: next to the histogram).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides params.base_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output_dir (stdout for `run`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LOW:HIGH")?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad low bound: {e}"))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad high bound: {e}"))?;
    if !(lo > 0.0 && hi > lo) {
        return Err("window must satisfy 0 < LOW < HIGH".into());
    }
    Ok((lo, hi))
}

/// Failure reported to the user: exit code plus one JSON line on stderr.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure {
            code: 2,
            kind: "usage",
            message: message.to_string(),
        }
    }

    fn config(message: impl ToString) -> Self {
        Failure {
            code: 2,
            kind: "config",
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Failure {
            code: 1,
            kind: "runtime",
            message: message.to_string(),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = load_config(&common.config).map_err(Failure::config)?;
    if let Some(seed) = common.seed {
        cfg.params.base_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn experiment(common: &Common, expected: ExperimentKind) -> Result<(), Failure> {
    let cfg = load(common)?;
    if cfg.experiment_kind != expected {
        return Err(Failure::config(format!(
            "config describes a {} experiment, not {}",
            cfg.experiment_kind.as_str(),
            expected.as_str()
        )));
    }
    let workers = resolve_workers(common.workers, &cfg).map_err(Failure::config)?;
    let opts = RunOptions {
        out_dir: cfg.output_dir.clone(),
        workers,
    };
    let manifest = runner::run_experiment(&cfg, &opts).map_err(Failure::runtime)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "wrote {} files to {} in {:.1}s",
        manifest.files.len() + 1,
        opts.out_dir.display(),
        manifest.wall_time_secs
    );
    Ok(())
}

fn run_one(common: &Common, realization: u64, threshold: Option<f64>) -> Result<(), Failure> {
    let cfg = load(common)?;
    let t = match threshold {
        Some(t) => t,
        None => match cfg.thresholds().as_slice() {
            [t] => *t,
            _ => {
                return Err(Failure::usage(
                    "config lists several thresholds; pass --threshold",
                ))
            }
        },
    };
    let p = cfg.params_at(t).validate().map_err(Failure::config)?;
    let result = match &common.out {
        Some(path) => {
            let file = std::fs::File::create(path)
                .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
            runner::stream_realization(&p, realization, file)
        }
        None => runner::stream_realization(&p, realization, std::io::stdout().lock()),
    };
    result.map(|_| ()).map_err(Failure::runtime)
}

fn fit(input: &Path, window: (f64, f64), out: Option<PathBuf>) -> Result<(), Failure> {
    let fit = runner::refit_histogram(input, window).map_err(Failure::runtime)?;
    let out = out.unwrap_or_else(|| input.with_file_name("fit.json"));
    runner::write_json_file(
        &out,
        &FitFile {
            fit,
            mle_alpha: None,
        },
    )
    .map_err(Failure::runtime)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            common,
            realization,
            threshold,
        } => run_one(&common, realization, threshold),
        Command::Series(c) => experiment(&c, ExperimentKind::StrengthSeries),
        Command::Sweep(c) => experiment(&c, ExperimentKind::ThresholdSweep),
        Command::Lifetimes(c) => experiment(&c, ExperimentKind::Lifetimes),
        Command::Fit { input, window, out } => fit(&input, window, out),
        Command::Validate { config } => {
            let cfg = load_config(&config).map_err(Failure::config)?;
            println!(
                "ok: {} with {} threshold(s)",
                cfg.experiment_kind.as_str(),
                cfg.thresholds().len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind, "message": f.message });
            let _ = writeln!(std::io::stderr(), "{line}");
            ExitCode::from(f.code)
        }
    }
}
