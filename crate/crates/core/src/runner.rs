//! End-to-end pipelines behind the command-line tool: simulate, calibrate,
//! evaluate and the Monte Carlo benchmark.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    self, load_truth, read_dataset, truth_sidecar_path, write_json, CalibrationFile, Dataset,
    REPORT_SCHEMA_VERSION,
};
use crate::metrics::{ellipsoid_fit, evaluate, EvaluationData, EvaluationReport, HeadingReference};
use crate::model::{build_windows, Aggregator, CalibrationResult, CalibrationState, SensorSample};
use crate::sim::{generate, preset, DatasetSpec, Preset, TruthParams};
use crate::solver::{
    detect_convergence, final_estimate, solve_batch, ConvergenceIndices, IncrementalEstimator, SolverConfig,
};

/// Offset between calibration and held-out evaluation seeds in benchmarks.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Batch least squares over all windows.
    Bfg,
    /// Incremental estimator, one update per window.
    Ifg,
    /// Magnetometer-only ellipsoid fit.
    Ellipsoid,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Bfg, Method::Ifg, Method::Ellipsoid];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bfg => "bfg",
            Method::Ifg => "ifg",
            Method::Ellipsoid => "ellipsoid",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bfg" => Ok(Method::Bfg),
            "ifg" => Ok(Method::Ifg),
            "ellipsoid" | "ef" => Ok(Method::Ellipsoid),
            _ => Err(Error::UnknownMethod(s.to_string())),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings shared by every calibration run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    /// Samples per window; inferred from the sampling rate when `None`.
    pub theta: Option<usize>,
    pub aggregator: Aggregator,
    /// Batch solver settings. The incremental solver uses the same noise
    /// model and tolerances with `incremental_iterations`.
    pub solver: SolverConfig,
    pub incremental_iterations: usize,
    pub tail_fraction: f64,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub heading_reference: HeadingReference,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Bfg,
            theta: None,
            aggregator: Aggregator::Median,
            solver: SolverConfig::batch(),
            incremental_iterations: SolverConfig::incremental().max_iterations,
            tail_fraction: 0.2,
            convergence_window: 10,
            convergence_tol: 1e-3,
            heading_reference: HeadingReference::Magnetic,
        }
    }
}

impl RunConfig {
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn incremental_solver(&self) -> SolverConfig {
        SolverConfig {
            max_iterations: self.incremental_iterations,
            ..self.solver.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(theta) = self.theta {
            if theta < 2 {
                return Err(Error::InvalidWindow(theta));
            }
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tail fraction must be in (0, 1], got {}",
                self.tail_fraction
            )));
        }
        if self.convergence_window < 2 {
            return Err(Error::InvalidConfig("convergence window must be at least 2".into()));
        }
        self.solver.information()?;
        self.incremental_solver().information()?;
        Ok(())
    }
}

/// Window length matching one second of data: the reciprocal of the median
/// sample interval, rounded, and at least 2.
pub fn default_theta(samples: &[SensorSample]) -> Result<usize> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let mut dt: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    dt.sort_by(f64::total_cmp);
    let mid = dt.len() / 2;
    let median = if dt.len().is_multiple_of(2) {
        0.5 * (dt[mid - 1] + dt[mid])
    } else {
        dt[mid]
    };
    if !(median > 0.0 && median.is_finite()) {
        return Err(Error::InvalidConfig("cannot infer the sampling rate".into()));
    }
    Ok(((1.0 / median).round() as usize).max(2))
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub method: Method,
    pub result: CalibrationResult,
    pub convergence: Option<ConvergenceIndices>,
    pub theta: Option<usize>,
    pub windows: usize,
}

impl Calibration {
    pub fn file(&self) -> CalibrationFile {
        CalibrationFile::new(self.method.name(), &self.result, self.convergence)
    }
}

/// Calibrates from raw samples. An ellipsoid fit that does not produce an
/// ellipsoid yields the identity calibration marked as not converged.
pub fn calibrate(samples: &[SensorSample], cfg: &RunConfig) -> Result<Calibration> {
    cfg.validate()?;
    if cfg.method == Method::Ellipsoid {
        let mags: Vec<_> = samples.iter().map(|s| s.mag).collect();
        let fit = ellipsoid_fit(&mags)?;
        let result = fit.calibration().unwrap_or_else(|| CalibrationResult {
            converged: false,
            ..CalibrationResult::identity()
        });
        return Ok(Calibration {
            method: cfg.method,
            result,
            convergence: None,
            theta: None,
            windows: 0,
        });
    }

    let theta = match cfg.theta {
        Some(t) => t,
        None => default_theta(samples)?,
    };
    let windows = build_windows(samples, theta, cfg.aggregator)?;
    let n = windows.len();
    let (result, convergence) = match cfg.method {
        Method::Bfg => (solve_batch(&windows, &cfg.solver, &CalibrationState::identity())?, None),
        Method::Ifg => {
            let mut est = IncrementalEstimator::new(cfg.incremental_solver())?;
            for w in windows {
                est.add(w)?;
            }
            let conv = detect_convergence(est.history(), cfg.convergence_window, cfg.convergence_tol);
            (final_estimate(&est, cfg.tail_fraction)?, Some(conv))
        }
        Method::Ellipsoid => unreachable!(),
    };
    Ok(Calibration {
        method: cfg.method,
        result,
        convergence,
        theta: Some(theta),
        windows: n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub dataset: PathBuf,
    pub truth: PathBuf,
    pub preset: String,
    pub seed: u64,
    pub samples: usize,
}

/// Simulates `spec` and writes the dataset plus its truth sidecar.
pub fn run_simulate(spec: &DatasetSpec, out: &Path) -> Result<SimulateSummary> {
    let ds = generate(spec)?;
    io::write_simulated(out, &ds)?;
    let truth = truth_sidecar_path(out);
    write_json(&truth, &spec.truth)?;
    Ok(SimulateSummary {
        dataset: out.to_path_buf(),
        truth,
        preset: spec.name.clone(),
        seed: spec.rng_seed,
        samples: ds.samples.len(),
    })
}

fn evaluation_report(
    method: &str,
    result: &CalibrationResult,
    dataset: &Dataset,
    name: &str,
    truth: Option<&TruthParams>,
    heading_reference: HeadingReference,
) -> Result<EvaluationReport> {
    let mags = dataset.mags();
    evaluate(
        method,
        result,
        &EvaluationData {
            dataset_name: name,
            mags: &mags,
            attitude: dataset.attitude.as_deref(),
            truth,
            heading_reference,
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateOutput {
    pub calibration_path: PathBuf,
    pub report_path: Option<PathBuf>,
    pub theta: Option<usize>,
    pub windows: usize,
    pub calibration: CalibrationFile,
    pub report: Option<EvaluationReport>,
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Calibrates a dataset file, writing `calibration.json` and, when truth
/// columns or truth parameters are available, `report.json` into `out_dir`.
pub fn run_calibrate(input: &Path, truth: Option<&Path>, out_dir: &Path, cfg: &RunConfig) -> Result<CalibrateOutput> {
    let dataset = read_dataset(input)?;
    let truth = load_truth(input, truth)?;
    let cal = calibrate(&dataset.samples, cfg)?;
    let file = cal.file();
    let calibration_path = out_dir.join("calibration.json");
    write_json(&calibration_path, &file)?;

    let (report, report_path) = if dataset.attitude.is_some() || truth.is_some() {
        let report = evaluation_report(
            cfg.method.name(),
            &cal.result,
            &dataset,
            &dataset_name(input),
            truth.as_ref(),
            cfg.heading_reference,
        )?;
        let path = out_dir.join("report.json");
        write_json(
            &path,
            &ReportFile {
                schema_version: REPORT_SCHEMA_VERSION,
                report: report.clone(),
            },
        )?;
        (Some(report), Some(path))
    } else {
        (None, None)
    };
    Ok(CalibrateOutput {
        calibration_path,
        report_path,
        theta: cal.theta,
        windows: cal.windows,
        calibration: file,
        report,
    })
}

/// Scores a stored calibration against a dataset file.
pub fn run_evaluate(
    calibration: &Path,
    input: &Path,
    truth: Option<&Path>,
    heading_reference: HeadingReference,
) -> Result<EvaluationReport> {
    let file: CalibrationFile = io::read_json(calibration)?;
    let result = file.to_result()?;
    let dataset = read_dataset(input)?;
    let truth = load_truth(input, truth)?;
    evaluation_report(
        &file.method,
        &result,
        &dataset,
        &dataset_name(input),
        truth.as_ref(),
        heading_reference,
    )
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub methods: Vec<Method>,
    pub presets: Vec<Preset>,
    pub runs: usize,
    pub base_seed: u64,
    pub run: RunConfig,
    /// Worker threads; rayon's default when `None`.
    pub threads: Option<usize>,
}

impl BenchmarkConfig {
    pub fn new(methods: Vec<Method>, presets: Vec<Preset>, runs: usize) -> Self {
        BenchmarkConfig {
            methods,
            presets,
            runs,
            base_seed: 0,
            run: RunConfig::default(),
            threads: None,
        }
    }
}

/// One calibrate-then-evaluate run. Metrics are on the held-out WAM
/// dataset; a run whose calibration failed to converge is scored with the
/// calibration it returned (identity for a failed ellipsoid fit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub preset: String,
    pub run: usize,
    pub calibration_seed: u64,
    pub evaluation_seed: u64,
    pub converged: bool,
    pub error: Option<String>,
    pub soft_iron_geodesic_error: Option<f64>,
    pub hard_iron_error: Option<f64>,
    pub gyro_bias_error: Option<f64>,
    pub heading_rmse: Option<f64>,
    pub field_magnitude_std: Option<f64>,
}

impl RunRecord {
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("soft_iron_geodesic_error", self.soft_iron_geodesic_error),
            ("hard_iron_error", self.hard_iron_error),
            ("gyro_bias_error", self.gyro_bias_error),
            ("heading_rmse", self.heading_rmse),
            ("field_magnitude_std", self.field_magnitude_std),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub preset: String,
    pub runs: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub soft_iron_geodesic_error: Option<f64>,
    pub hard_iron_error: Option<f64>,
    pub gyro_bias_error: Option<f64>,
    pub heading_rmse: Option<f64>,
    pub field_magnitude_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub schema_version: u32,
    pub runs_per_cell: usize,
    pub base_seed: u64,
    /// The uncalibrated held-out data, one record per run.
    pub raw: Aggregate,
    pub aggregates: Vec<Aggregate>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
    #[serde(skip)]
    pub raw_records: Vec<RunRecord>,
}

impl BenchmarkSummary {
    pub fn aggregate(&self, method: Method, preset: Preset) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method.name() && a.preset == preset.name())
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn aggregate(method: &str, preset: &str, records: &[&RunRecord]) -> Aggregate {
    let failures = records.iter().filter(|r| !r.converged).count();
    Aggregate {
        method: method.to_string(),
        preset: preset.to_string(),
        runs: records.len(),
        failures,
        failure_rate: if records.is_empty() {
            0.0
        } else {
            failures as f64 / records.len() as f64
        },
        soft_iron_geodesic_error: mean(records.iter().map(|r| r.soft_iron_geodesic_error)),
        hard_iron_error: mean(records.iter().map(|r| r.hard_iron_error)),
        gyro_bias_error: mean(records.iter().map(|r| r.gyro_bias_error)),
        heading_rmse: mean(records.iter().map(|r| r.heading_rmse)),
        field_magnitude_std: mean(records.iter().map(|r| r.field_magnitude_std)),
    }
}

fn record_from(
    method: &str,
    preset: Preset,
    run: usize,
    seeds: (u64, u64),
    outcome: Result<EvaluationReport>,
) -> RunRecord {
    let mut rec = RunRecord {
        method: method.to_string(),
        preset: preset.name().to_string(),
        run,
        calibration_seed: seeds.0,
        evaluation_seed: seeds.1,
        converged: false,
        error: None,
        soft_iron_geodesic_error: None,
        hard_iron_error: None,
        gyro_bias_error: None,
        heading_rmse: None,
        field_magnitude_std: None,
    };
    match outcome {
        Ok(r) => {
            rec.converged = r.converged;
            rec.soft_iron_geodesic_error = r.soft_iron_geodesic_error;
            rec.hard_iron_error = r.hard_iron_error;
            rec.gyro_bias_error = r.gyro_bias_error;
            rec.heading_rmse = r.heading_rmse;
            rec.field_magnitude_std = Some(r.field_magnitude_std);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

fn held_out(base_seed: u64, run: usize) -> Result<(u64, Dataset, TruthParams)> {
    let seed = base_seed + HELD_OUT_SEED_OFFSET + run as u64;
    let spec = preset(Preset::Wam).with_seed(seed);
    let ds = generate(&spec)?;
    Ok((seed, Dataset::from(&ds), spec.truth))
}

fn benchmark_job(cfg: &BenchmarkConfig, method: Method, which: Preset, run: usize) -> RunRecord {
    let cal_seed = cfg.base_seed + run as u64;
    let eval_seed = cfg.base_seed + HELD_OUT_SEED_OFFSET + run as u64;
    let outcome = (|| {
        let spec = preset(which).with_seed(cal_seed);
        let ds = generate(&spec)?;
        let cal = calibrate(&ds.samples, &cfg.run.clone().with_method(method))?;
        let (_, eval, truth) = held_out(cfg.base_seed, run)?;
        evaluation_report(
            method.name(),
            &cal.result,
            &eval,
            "wam",
            Some(&truth),
            cfg.run.heading_reference,
        )
    })();
    record_from(method.name(), which, run, (cal_seed, eval_seed), outcome)
}

fn raw_job(cfg: &BenchmarkConfig, run: usize) -> RunRecord {
    let cal_seed = cfg.base_seed + run as u64;
    let outcome = held_out(cfg.base_seed, run).and_then(|(_, eval, truth)| {
        evaluation_report(
            "raw",
            &CalibrationResult::identity(),
            &eval,
            "wam",
            Some(&truth),
            cfg.run.heading_reference,
        )
    });
    let mut rec = record_from(
        "raw",
        Preset::Wam,
        run,
        (cal_seed, cfg.base_seed + HELD_OUT_SEED_OFFSET + run as u64),
        outcome,
    );
    // the identity has no gyro estimate to score
    rec.gyro_bias_error = None;
    rec
}

/// Runs every (method, preset, run) cell, in parallel, without touching the
/// filesystem. Per-run failures are recorded, not propagated.
pub fn benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkSummary> {
    if cfg.methods.is_empty() || cfg.presets.is_empty() || cfg.runs == 0 {
        return Err(Error::InvalidConfig(
            "benchmark needs at least one method, one preset and one run".into(),
        ));
    }
    cfg.run.validate()?;
    let jobs: Vec<(Method, Preset, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| {
            cfg.presets
                .iter()
                .flat_map(move |&p| (0..cfg.runs).map(move |r| (m, p, r)))
        })
        .collect();
    let work = || {
        let records: Vec<RunRecord> = jobs
            .par_iter()
            .map(|&(m, p, r)| benchmark_job(cfg, m, p, r))
            .collect();
        let raw: Vec<RunRecord> = (0..cfg.runs).into_par_iter().map(|r| raw_job(cfg, r)).collect();
        (records, raw)
    };
    let (records, raw_records) = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    };

    let mut aggregates = Vec::new();
    for &m in &cfg.methods {
        for &p in &cfg.presets {
            let cell: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.method == m.name() && r.preset == p.name())
                .collect();
            aggregates.push(aggregate(m.name(), p.name(), &cell));
        }
    }
    let raw = aggregate("raw", "wam", &raw_records.iter().collect::<Vec<_>>());
    Ok(BenchmarkSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        runs_per_cell: cfg.runs,
        base_seed: cfg.base_seed,
        raw,
        aggregates,
        records,
        raw_records,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkOutput {
    pub runs_path: PathBuf,
    pub summary_path: PathBuf,
    pub plot_data_path: PathBuf,
    pub summary: BenchmarkSummary,
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::io("<memory>", e.into_error()))
}

#[derive(Serialize)]
struct PlotRow<'a> {
    method: &'a str,
    preset: &'a str,
    run: usize,
    metric: &'a str,
    value: f64,
}

/// Runs the benchmark and writes `runs.csv`, `summary.json` and the tidy
/// `plot_data.csv` (one row per run and metric) into `out_dir`.
pub fn run_benchmark(cfg: &BenchmarkConfig, out_dir: &Path) -> Result<BenchmarkOutput> {
    let summary = benchmark(cfg)?;
    let all: Vec<&RunRecord> = summary.records.iter().chain(&summary.raw_records).collect();

    let runs_path = out_dir.join("runs.csv");
    io::write_atomic(&runs_path, &to_csv(&all)?)?;

    let plot: Vec<PlotRow> = all
        .iter()
        .flat_map(|r| {
            r.metrics().into_iter().filter_map(move |(metric, v)| {
                v.map(|value| PlotRow {
                    method: &r.method,
                    preset: &r.preset,
                    run: r.run,
                    metric,
                    value,
                })
            })
        })
        .collect();
    let plot_data_path = out_dir.join("plot_data.csv");
    io::write_atomic(&plot_data_path, &to_csv(&plot)?)?;

    let summary_path = out_dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok(BenchmarkOutput {
        runs_path,
        summary_path,
        plot_data_path,
        summary,
    })
}
