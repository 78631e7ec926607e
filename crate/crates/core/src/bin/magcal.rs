use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use magcal::math::Mat3;
use magcal::metrics::HeadingReference;
use magcal::model::Aggregator;
use magcal::runner::{self, BenchmarkConfig, Method, RunConfig};
use magcal::sim::{preset, Preset};
use magcal::Result;

/// Joint magnetometer and gyroscope-bias calibration.
#[derive(Parser)]
#[command(name = "magcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a preset trajectory and write it as CSV with a truth sidecar.
    Simulate {
        #[arg(long, default_value = "wam")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Disable sensor noise.
        #[arg(long)]
        noise_free: bool,
        /// Duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Calibrate a dataset.
    Calibrate {
        #[arg(long, default_value = "bfg")]
        method: Method,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, env = "MAGCAL_OUT_DIR", default_value = ".")]
        out: PathBuf,
        /// Truth parameters JSON; defaults to `<in>.truth.json` when present.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Score a calibration file against a dataset.
    Evaluate {
        #[arg(long)]
        calib: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = "magnetic")]
        heading_reference: HeadingReference,
    },
    /// Monte Carlo comparison on held-out WAM data.
    Benchmark {
        #[arg(long, value_delimiter = ',', default_value = "bfg,ifg,ellipsoid")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "wam,mam,lam")]
        presets: Vec<Preset>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "MAGCAL_OUT_DIR", default_value = ".")]
        out: PathBuf,
        #[arg(long, env = "MAGCAL_THREADS")]
        threads: Option<usize>,
        #[command(flatten)]
        solver: SolverArgs,
    },
}

#[derive(Args)]
struct SolverArgs {
    /// Samples per window; defaults to the sampling rate.
    #[arg(long)]
    theta: Option<usize>,
    #[arg(long, default_value = "median")]
    aggregator: Aggregator,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    abs_tol: Option<f64>,
    /// Batch solver iteration cap.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Iterations per incremental update.
    #[arg(long)]
    incremental_iterations: Option<usize>,
    /// Residual noise standard deviation; the covariance is its square times I.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Fraction of incremental estimates averaged into the final one.
    #[arg(long)]
    tail_fraction: Option<f64>,
    #[arg(long, default_value = "magnetic")]
    heading_reference: HeadingReference,
}

impl SolverArgs {
    fn config(&self, method: Method) -> RunConfig {
        let mut cfg = RunConfig {
            method,
            theta: self.theta,
            aggregator: self.aggregator,
            heading_reference: self.heading_reference,
            ..RunConfig::default()
        };
        if let Some(v) = self.rel_tol {
            cfg.solver.rel_tol = v;
        }
        if let Some(v) = self.abs_tol {
            cfg.solver.abs_tol = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.solver.max_iterations = v;
        }
        if let Some(v) = self.incremental_iterations {
            cfg.incremental_iterations = v;
        }
        if let Some(s) = self.noise_std {
            cfg.solver.noise_covariance = Mat3::identity() * (s * s);
        }
        if let Some(v) = self.tail_fraction {
            cfg.tail_fraction = v;
        }
        cfg
    }
}

/// JSON payload for stdout and whether the run should exit nonzero.
fn run(cli: Cli) -> Result<(serde_json::Value, bool)> {
    match cli.command {
        Command::Simulate {
            preset: which,
            seed,
            out,
            noise_free,
            duration,
        } => {
            let mut spec = preset(which).with_seed(seed);
            if noise_free {
                spec = spec.noise_free();
            }
            if let Some(d) = duration {
                spec.duration = d;
            }
            Ok((serde_json::to_value(runner::run_simulate(&spec, &out)?)?, false))
        }
        Command::Calibrate {
            method,
            input,
            out,
            truth,
            solver,
        } => {
            let out = runner::run_calibrate(&input, truth.as_deref(), &out, &solver.config(method))?;
            let diverged = !out.calibration.diagnostics.converged;
            Ok((serde_json::to_value(out)?, diverged))
        }
        Command::Evaluate {
            calib,
            input,
            truth,
            heading_reference,
        } => Ok((
            serde_json::to_value(runner::run_evaluate(&calib, &input, truth.as_deref(), heading_reference)?)?,
            false,
        )),
        Command::Benchmark {
            methods,
            presets,
            runs,
            seed,
            out,
            threads,
            solver,
        } => {
            let cfg = BenchmarkConfig {
                base_seed: seed,
                run: solver.config(Method::Bfg),
                threads,
                ..BenchmarkConfig::new(methods, presets, runs)
            };
            Ok((serde_json::to_value(runner::run_benchmark(&cfg, &out)?)?, false))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((payload, diverged)) => {
            println!("{}", serde_json::to_string_pretty(&payload).unwrap_or_default());
            if diverged {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            println!("{}", json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
