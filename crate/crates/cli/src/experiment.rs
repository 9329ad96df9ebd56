//! Experiment execution and artifact output.
//!
//! A run is a grid of blocks (`n_values x sigma_scales`), each a batch of
//! independent coupled trials. Trials fan out to a worker pool, every trial
//! owning the generator stream derived from its global index, and results
//! are reduced in trial order regardless of completion order — output bytes
//! are identical at any thread count.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gfom::coupling::{build_coupling, verify_identity};
use gfom::diagnostics::{error_report, psi_terms_with_alignment, tail_frequency, ErrorReport};
use gfom::state_evolution::{SeParams, SeParamsRecord};
use gfom::wasserstein::{ar_alpha_sq, lb_linear_case};
use gfom::{RngStream, SystemSpec};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, RunMode, SystemFamily};
use crate::presets::{build_instances, scale_params, BuildError};
use crate::verify::{run_checks, CheckResult, CheckSizes};

pub const SCHEMA_VERSION: &str = "1";

/// Disjoint stream regions so trial, recursion, and mismatch sampling can
/// never collide; blocks are spaced far wider than any substream fan-out.
const REGION_SE: u64 = 0x0100_0000_0000_0000;
const REGION_TRIAL: u64 = 0x0200_0000_0000_0000;
const REGION_PSI: u64 = 0x0300_0000_0000_0000;
const BLOCK_SHIFT: u32 = 40;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Core(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialSeed {
    pub block: usize,
    pub trial: u64,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub block: usize,
    pub trial: u64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockSummary {
    pub block: usize,
    pub n: usize,
    pub t_max: usize,
    pub sigma_scale: f64,
    pub trials: usize,
    pub failed: usize,
    pub median_total_error: Option<f64>,
    pub max_identity_residual: Option<f64>,
    pub median_x_norm_over_sqrt_n: Option<f64>,
    pub psi1: f64,
    pub psi1_stderr: f64,
    pub psi2: f64,
    pub total_fallbacks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub passed: usize,
    pub failed: usize,
    pub checks: Vec<CheckLine>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub library_version: String,
    pub driver_version: String,
    /// Canonical flat config; feeding these pairs back through the parser
    /// reproduces the run byte for byte.
    pub config: BTreeMap<String, String>,
    pub out_files: Vec<String>,
    pub csv_schemas: BTreeMap<String, Vec<String>>,
    pub blocks: Vec<BlockSummary>,
    pub trial_seeds: Vec<TrialSeed>,
    pub failures: Vec<Failure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSummary>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty() && self.oracle.as_ref().is_none_or(|o| o.failed == 0)
    }
}

/// 17 significant digits: enough to reproduce any `f64` bit pattern.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

struct CsvFile {
    writer: BufWriter<File>,
    path: PathBuf,
    columns: Vec<String>,
}

impl CsvFile {
    fn create(dir: &Path, name: &str, columns: Vec<String>) -> Result<Self, ExperimentError> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{}", columns.join(",")).map_err(io_err(&path))?;
        Ok(CsvFile {
            writer,
            path,
            columns,
        })
    }

    fn row(&mut self, fields: &[String]) -> Result<(), ExperimentError> {
        debug_assert_eq!(fields.len(), self.columns.len());
        writeln!(self.writer, "{}", fields.join(",")).map_err(io_err(&self.path))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), ExperimentError> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

struct TrialOutcome {
    trial: u64,
    stream: u64,
    result: Result<(ErrorReport, f64), String>,
}

fn run_trial(
    sys: &SystemSpec,
    params: &SeParams,
    trial: u64,
    stream: RngStream,
) -> Result<(ErrorReport, f64), String> {
    let run = build_coupling(sys, params, stream).map_err(|e| e.to_string())?;
    let residual = verify_identity(&run);
    let report = error_report(&run, sys, params, trial).map_err(|e| e.to_string())?;
    Ok((report, residual))
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

fn coupling_columns(t_max: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "trial",
        "seed",
        "stream",
        "n",
        "t_max",
        "sigma_scale",
        "status",
        "total_error",
        "identity_residual",
        "x_norm_over_sqrt_n",
        "delta1",
        "delta2",
        "omega_21",
        "lf",
        "lg",
        "fallbacks",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for t in 1..=t_max {
        cols.push(format!("step_error_{t}"));
    }
    cols
}

fn exceedance_columns() -> Vec<String> {
    [
        "trial",
        "seed",
        "n",
        "t_max",
        "sigma_scale",
        "r",
        "nominal_bound",
        "exceed",
        "trials",
        "observed",
        "wilson_low",
        "wilson_high",
        "consistent",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn wasserstein_columns() -> Vec<String> {
    [
        "trial",
        "seed",
        "n",
        "t_max",
        "sigma_scale",
        "step",
        "alpha_sq",
        "beta_sq",
        "w2_sq",
        "expected_alpha_sq",
        "lower_bound_total",
        "sandwich_low",
        "sandwich_high",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn oracle_columns() -> Vec<String> {
    [
        "trial", "seed", "n", "t_max", "check", "statistic", "threshold", "passed", "detail",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Serialize)]
struct SeParamsBlockRecord {
    block: usize,
    n: usize,
    sigma_scale: f64,
    psi1: f64,
    psi1_stderr: f64,
    psi2: f64,
    psi_replicates: usize,
    params: SeParamsRecord,
}

#[derive(Serialize)]
struct SeParamsFile {
    schema_version: String,
    blocks: Vec<SeParamsBlockRecord>,
}

/// Executes a validated config and writes its artifacts under `config.out`.
///
/// Individual trial failures do not abort the run: the corresponding CSV row
/// is marked `failed`, the message lands in the manifest, and everything
/// written so far has already been flushed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| ExperimentError::Core(format!("worker pool: {e}")))?;

    let mut manifest = pool.install(|| match config.mode {
        RunMode::Coupling => run_coupling_mode(config),
        RunMode::Oracle => run_oracle_mode(config),
    })?;

    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    let manifest_path = config.out.join("manifest.json");
    let file = File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, &manifest)
        .map_err(|e| ExperimentError::Core(format!("manifest serialization: {e}")))?;
    writer.write_all(b"\n").map_err(io_err(&manifest_path))?;
    writer.flush().map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

fn base_manifest(config: &ExperimentConfig) -> RunManifest {
    RunManifest {
        schema_version: SCHEMA_VERSION.to_string(),
        library_version: gfom::VERSION.to_string(),
        driver_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.to_key_values().into_iter().collect(),
        out_files: Vec::new(),
        csv_schemas: BTreeMap::new(),
        blocks: Vec::new(),
        trial_seeds: Vec::new(),
        failures: Vec::new(),
        oracle: None,
        wall_time_secs: 0.0,
    }
}

fn run_coupling_mode(config: &ExperimentConfig) -> Result<RunManifest, ExperimentError> {
    let instances = build_instances(config, RngStream::new(config.seed, REGION_SE))?;
    let seed = config.seed;
    let t_max = config.t_max;

    let mut coupling = CsvFile::create(&config.out, "coupling_errors.csv", coupling_columns(t_max))?;
    let mut exceedance = CsvFile::create(&config.out, "exceedance.csv", exceedance_columns())?;
    let mut wasserstein = CsvFile::create(&config.out, "wasserstein.csv", wasserstein_columns())?;

    let mut manifest = base_manifest(config);
    let mut se_blocks = Vec::new();

    let mut block = 0usize;
    for (instance, &n) in instances.iter().zip(&config.n_values) {
        debug_assert_eq!(instance.sys.dim(), n);
        for &scale in &config.sigma_scales {
            let params = scale_params(&instance.params, scale)?;
            let scale_str = fmt_f64(scale);
            let trial_base = REGION_TRIAL + ((block as u64) << BLOCK_SHIFT);

            let outcomes: Vec<TrialOutcome> = (0..config.trials)
                .into_par_iter()
                .map(|i| {
                    let stream = trial_base + i as u64;
                    let trial = (block * config.trials + i) as u64;
                    TrialOutcome {
                        trial,
                        stream,
                        result: run_trial(
                            &instance.sys,
                            &params,
                            trial,
                            RngStream::new(seed, stream),
                        ),
                    }
                })
                .collect();

            let mut reports = Vec::with_capacity(outcomes.len());
            let mut residuals = Vec::with_capacity(outcomes.len());
            let mut failed = 0usize;
            for outcome in &outcomes {
                manifest.trial_seeds.push(TrialSeed {
                    block,
                    trial: outcome.trial,
                    seed,
                    stream: outcome.stream,
                });
                let mut fields = vec![
                    outcome.trial.to_string(),
                    seed.to_string(),
                    outcome.stream.to_string(),
                    n.to_string(),
                    t_max.to_string(),
                    scale_str.clone(),
                ];
                match &outcome.result {
                    Ok((report, residual)) => {
                        fields.push("ok".into());
                        fields.push(fmt_f64(report.total));
                        fields.push(fmt_f64(*residual));
                        fields.push(fmt_f64(report.x_norm_over_sqrt_n));
                        fields.push(fmt_f64(report.delta1));
                        fields.push(fmt_f64(report.delta2));
                        fields.push(fmt_f64(report.omega_21));
                        fields.push(fmt_f64(report.lf));
                        fields.push(fmt_f64(report.lg));
                        fields.push(report.fallbacks.to_string());
                        for t in 0..t_max {
                            fields.push(fmt_f64(report.per_step[t]));
                        }
                        reports.push(report.clone());
                        residuals.push(*residual);
                    }
                    Err(message) => {
                        failed += 1;
                        manifest.failures.push(Failure {
                            block,
                            trial: outcome.trial,
                            message: message.clone(),
                        });
                        fields.push("failed".into());
                        for _ in 0..(9 + t_max) {
                            fields.push(String::new());
                        }
                    }
                }
                coupling.row(&fields)?;
            }
            coupling.flush()?;

            for point in tail_frequency(&reports, &config.r_grid) {
                exceedance.row(&[
                    "-1".into(),
                    seed.to_string(),
                    n.to_string(),
                    t_max.to_string(),
                    scale_str.clone(),
                    fmt_f64(point.r),
                    fmt_f64(point.bound),
                    point.exceed.to_string(),
                    point.trials.to_string(),
                    fmt_f64(point.observed),
                    fmt_f64(point.wilson_low),
                    fmt_f64(point.wilson_high),
                    (point.consistent() as u8).to_string(),
                ])?;
            }
            exceedance.flush()?;

            if let Some(spec) = &instance.linear {
                let lb = lb_linear_case(spec, &params.sigma, n)
                    .map_err(|e| ExperimentError::Core(format!("distance table: {e}")))?;
                let drift = match config.system {
                    SystemFamily::Orthogonal => 0.0,
                    _ => config.lambda,
                };
                for t in 0..t_max {
                    wasserstein.row(&[
                        "-1".into(),
                        seed.to_string(),
                        n.to_string(),
                        t_max.to_string(),
                        scale_str.clone(),
                        (t + 1).to_string(),
                        fmt_f64(lb.alpha[t] * lb.alpha[t]),
                        fmt_f64(lb.beta[t] * lb.beta[t]),
                        fmt_f64(lb.w2_sq_per_step[t]),
                        fmt_f64(ar_alpha_sq(drift, t + 1)),
                        fmt_f64(lb.lower_bound),
                        fmt_f64(lb.sandwich_low),
                        fmt_f64(lb.sandwich_high),
                    ])?;
                }
                wasserstein.flush()?;
            }

            let psi = psi_terms_with_alignment(
                &instance.sys,
                &params,
                &params.b,
                config.psi_replicates,
                RngStream::new(seed, REGION_PSI + ((block as u64) << BLOCK_SHIFT)),
            )
            .map_err(|e| ExperimentError::Core(format!("mismatch estimate: {e}")))?;

            let mut totals: Vec<f64> = reports.iter().map(|r| r.total).collect();
            let mut x_norms: Vec<f64> = reports.iter().map(|r| r.x_norm_over_sqrt_n).collect();
            manifest.blocks.push(BlockSummary {
                block,
                n,
                t_max,
                sigma_scale: scale,
                trials: config.trials,
                failed,
                median_total_error: median(&mut totals),
                max_identity_residual: residuals
                    .iter()
                    .copied()
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))),
                median_x_norm_over_sqrt_n: median(&mut x_norms),
                psi1: psi.psi1,
                psi1_stderr: psi.psi1_stderr,
                psi2: psi.psi2,
                total_fallbacks: reports.iter().map(|r| r.fallbacks).sum(),
            });

            se_blocks.push(SeParamsBlockRecord {
                block,
                n,
                sigma_scale: scale,
                psi1: psi.psi1,
                psi1_stderr: psi.psi1_stderr,
                psi2: psi.psi2,
                psi_replicates: psi.replicates,
                params: SeParamsRecord::from(&params),
            });

            block += 1;
        }
    }

    let se_path = config.out.join("se_params.json");
    let file = File::create(&se_path).map_err(io_err(&se_path))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(
        &mut writer,
        &SeParamsFile {
            schema_version: SCHEMA_VERSION.to_string(),
            blocks: se_blocks,
        },
    )
    .map_err(|e| ExperimentError::Core(format!("parameter serialization: {e}")))?;
    writer.write_all(b"\n").map_err(io_err(&se_path))?;
    writer.flush().map_err(io_err(&se_path))?;

    manifest.csv_schemas.insert("coupling_errors.csv".into(), coupling.columns.clone());
    manifest.csv_schemas.insert("exceedance.csv".into(), exceedance.columns.clone());
    manifest.csv_schemas.insert("wasserstein.csv".into(), wasserstein.columns.clone());
    manifest.out_files = vec![
        "coupling_errors.csv".into(),
        "exceedance.csv".into(),
        "wasserstein.csv".into(),
        "se_params.json".into(),
        "manifest.json".into(),
    ];
    Ok(manifest)
}

fn run_oracle_mode(config: &ExperimentConfig) -> Result<RunManifest, ExperimentError> {
    let sizes = CheckSizes::from_config(config);
    let results: Vec<CheckResult> = run_checks(config.seed, false, &sizes);

    let mut file = CsvFile::create(&config.out, "oracle_checks.csv", oracle_columns())?;
    for r in &results {
        file.row(&[
            "-1".into(),
            config.seed.to_string(),
            sizes.n.to_string(),
            sizes.t_max.to_string(),
            r.name.to_string(),
            fmt_f64(r.statistic),
            fmt_f64(r.threshold),
            (r.passed as u8).to_string(),
            r.detail.replace(',', ";"),
        ])?;
    }
    file.flush()?;

    let mut manifest = base_manifest(config);
    manifest.csv_schemas.insert("oracle_checks.csv".into(), file.columns.clone());
    manifest.out_files = vec!["oracle_checks.csv".into(), "manifest.json".into()];
    manifest.oracle = Some(OracleSummary {
        passed: results.iter().filter(|r| r.passed).count(),
        failed: results.iter().filter(|r| !r.passed).count(),
        checks: results
            .iter()
            .map(|r| CheckLine {
                name: r.name.to_string(),
                statistic: r.statistic,
                threshold: r.threshold,
                passed: r.passed,
            })
            .collect(),
    });
    Ok(manifest)
}

/// Runs the config once per dimension, each into its own subdirectory of
/// `config.out`. Streams restart per sub-run, so a sweep is a set of
/// independently reproducible runs rather than one sliced run.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<RunManifest>, ExperimentError> {
    config.validate()?;
    let mut manifests = Vec::with_capacity(config.n_values.len());
    for &n in &config.n_values {
        let mut sub = config.clone();
        sub.n_values = vec![n];
        sub.out = config.out.join(format!("n{n:05}"));
        manifests.push(run_experiment(&sub)?);
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_is_17_significant_digits() {
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        let x = 0.1 + 0.2;
        let parsed: f64 = fmt_f64(x).parse().unwrap();
        assert_eq!(parsed.to_bits(), x.to_bits());
    }

    #[test]
    fn median_handles_even_and_odd_lengths() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
