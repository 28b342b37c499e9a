//! End-to-end workflows shared by the command-line tool and the tests:
//! simulate, infer, evaluate and multi-run pipelines.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{Dataset, TruthTable};
use crate::error::{QpiError, Result};
use crate::evaluation::{aggregate, error_curve, qpt_baseline, ErrorCurve};
use crate::inference::{infer, InferenceOptions, InferenceResult};
use crate::model::Model;
use crate::schedule::Schedule;
use crate::sim::{exact_probabilities, sample_counts};

pub const DATASET_FILE: &str = "dataset.qpd";
pub const TRUTH_FILE: &str = "truth.qpt";
pub const MODEL_FILE: &str = "model.qpm";
pub const DIMENSION_FILE: &str = "dimension.txt";
pub const LOG_FILE: &str = "infer.log";
pub const ERRORS_FILE: &str = "errors.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Exact probabilities over the schedule and `grid`, for the configured
/// scenario.
pub fn simulate_truth(cfg: &RunConfig, grid: &[u64]) -> Result<(Schedule, TruthTable)> {
    let schedule = Schedule::build(cfg.schedule_params()?)?;
    let scenario = cfg.build_scenario()?;
    let truth = exact_probabilities(&scenario, Some(&schedule), grid);
    Ok((schedule, truth))
}

/// Simulated dataset and truth table for one seed.
pub fn simulate(cfg: &RunConfig, seed: u64, grid: &[u64]) -> Result<(Dataset, TruthTable)> {
    let (schedule, truth) = simulate_truth(cfg, grid)?;
    let dataset = sample_counts(&truth, &schedule, cfg.shots, seed)?;
    Ok((dataset, truth))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| QpiError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| QpiError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

/// Text log of an inference run: stage objectives, then warnings.
pub fn inference_log(result: &InferenceResult) -> String {
    let mut out = String::new();
    for line in &result.log {
        out.push_str(line);
        out.push('\n');
    }
    for w in &result.warnings {
        out.push_str("warning: ");
        out.push_str(w);
        out.push('\n');
    }
    out
}

/// Writes model, dimension report and inference log into `dir`.
pub fn write_inference(dir: &Path, result: &InferenceResult) -> Result<()> {
    create_dir(dir)?;
    result.model.save(&dir.join(MODEL_FILE))?;
    write_text(&dir.join(DIMENSION_FILE), &result.dimension_report.to_text())?;
    write_text(&dir.join(LOG_FILE), &inference_log(result))
}

/// Error curve of `model` with the process-tomography baseline when the
/// truth table supports one.
pub fn evaluate(
    model: &Model,
    truth: &TruthTable,
    grid: &[u64],
    dataset: Option<&Dataset>,
) -> Result<(ErrorCurve, Vec<String>)> {
    let mut warnings = Vec::new();
    let baseline = match qpt_baseline(truth) {
        Ok(b) => Some(b),
        Err(e @ QpiError::BaselineInfeasible(_)) => {
            warnings.push(e.to_string());
            None
        }
        Err(e) => return Err(e),
    };
    let curve = error_curve(model, truth, grid, dataset, baseline.as_ref())?;
    Ok((curve, warnings))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub d_estimate: Option<usize>,
    pub d: Option<usize>,
    pub phi_last: Option<f64>,
    pub psi: Option<f64>,
    pub mean_qpi_error: Option<f64>,
    pub mean_raw_error: Option<f64>,
    pub mean_qpt_error: Option<f64>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineSummary {
    pub scenario: String,
    pub seed_base: u64,
    pub runs: Vec<RunSummary>,
    pub failed_runs: usize,
    /// Most frequent final dimension; ties go to the smaller one.
    pub majority_d: Option<usize>,
    pub mean_qpi_error: Option<f64>,
    pub mean_qpt_error: Option<f64>,
}

impl PipelineSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub result: Option<InferenceResult>,
    pub curve: Option<ErrorCurve>,
}

/// One replicate: sample, infer, evaluate; writes its artifacts into `dir`
/// when given. Failures are recorded in the summary rather than returned.
pub fn run_once(
    run: usize,
    seed: u64,
    cfg: &RunConfig,
    schedule: &Schedule,
    truth: &TruthTable,
    grid: &[u64],
    opts: &InferenceOptions,
    dir: Option<&Path>,
) -> Result<RunOutput> {
    let mut summary = RunSummary {
        run,
        seed,
        d_estimate: None,
        d: None,
        phi_last: None,
        psi: None,
        mean_qpi_error: None,
        mean_raw_error: None,
        mean_qpt_error: None,
        warnings: Vec::new(),
        error: None,
    };
    let dataset = sample_counts(truth, schedule, cfg.shots, seed)?;
    if let Some(dir) = dir {
        create_dir(dir)?;
        dataset.write(&dir.join(DATASET_FILE))?;
    }
    let result = match infer(&dataset, opts) {
        Ok(r) => r,
        Err(e @ (QpiError::Io(_) | QpiError::Config(_))) => return Err(e),
        Err(e) => {
            summary.error = Some(e.to_string());
            return Ok(RunOutput { summary, result: None, curve: None });
        }
    };
    if let Some(dir) = dir {
        write_inference(dir, &result)?;
    }
    summary.d_estimate = Some(result.d_estimate);
    summary.d = Some(result.d_final);
    summary.phi_last = Some(result.stage3.phi_last());
    summary.psi = result.final_fit.as_ref().map(|f| f.psi);
    summary.warnings = result.warnings.clone();
    let (curve, warnings) = match evaluate(&result.model, truth, grid, Some(&dataset)) {
        Ok(x) => x,
        Err(e @ (QpiError::Io(_) | QpiError::Config(_))) => return Err(e),
        Err(e) => {
            summary.error = Some(e.to_string());
            return Ok(RunOutput { summary, result: Some(result), curve: None });
        }
    };
    summary.warnings.extend(warnings);
    summary.mean_qpi_error = mean(curve.rows.iter().map(|r| r.qpi));
    summary.mean_raw_error = mean(curve.rows.iter().filter_map(|r| r.raw));
    summary.mean_qpt_error = mean(curve.rows.iter().filter_map(|r| r.qpt));
    if let Some(dir) = dir {
        write_text(&dir.join(ERRORS_FILE), &curve.to_csv())?;
    }
    Ok(RunOutput { summary, result: Some(result), curve: Some(curve) })
}

pub struct PipelineOptions {
    pub runs: usize,
    pub workers: usize,
    pub seed_base: u64,
    pub grid: Vec<u64>,
    pub out: Option<PathBuf>,
}

pub fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join(format!("run_{run}"))
}

/// Runs `runs` replicates with seeds `seed_base + j` on a pool of
/// `workers` threads. Outputs do not depend on the worker count.
pub fn pipeline(cfg: &RunConfig, popts: &PipelineOptions) -> Result<(PipelineSummary, Vec<RunOutput>)> {
    if popts.runs == 0 {
        return Err(QpiError::Config("runs must be at least 1".into()));
    }
    let opts = cfg.inference.options()?;
    let (schedule, truth) = simulate_truth(cfg, &popts.grid)?;
    if let Some(out) = &popts.out {
        create_dir(out)?;
        truth.write(&out.join(TRUTH_FILE))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(popts.workers.max(1))
        .build()
        .map_err(|e| QpiError::Config(format!("thread pool: {e}")))?;
    let outputs: Vec<Result<RunOutput>> = pool.install(|| {
        (0..popts.runs)
            .into_par_iter()
            .map(|j| {
                let dir = popts.out.as_ref().map(|o| run_dir(o, j));
                let seed = popts.seed_base.wrapping_add(j as u64);
                run_once(j, seed, cfg, &schedule, &truth, &popts.grid, &opts, dir.as_deref())
            })
            .collect()
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let runs: Vec<RunSummary> = outputs.iter().map(|o| o.summary.clone()).collect();
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for d in runs.iter().filter_map(|r| r.d) {
        *counts.entry(d).or_default() += 1;
    }
    let majority_d = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&d, _)| d);
    let summary = PipelineSummary {
        scenario: cfg.scenario_name()?.to_string(),
        seed_base: popts.seed_base,
        failed_runs: runs.iter().filter(|r| r.error.is_some()).count(),
        majority_d,
        mean_qpi_error: mean(runs.iter().filter_map(|r| r.mean_qpi_error)),
        mean_qpt_error: mean(runs.iter().filter_map(|r| r.mean_qpt_error)),
        runs,
    };
    if let Some(out) = &popts.out {
        let curves: Vec<ErrorCurve> = outputs.iter().filter_map(|o| o.curve.clone()).collect();
        write_text(&out.join(AGGREGATE_FILE), &aggregate(&curves))?;
        write_text(&out.join(SUMMARY_FILE), &summary.to_json())?;
    }
    Ok((summary, outputs))
}

/// Reads error curves and merges them with [`aggregate`].
pub fn aggregate_files(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(QpiError::Input("no error curves to aggregate".into()));
    }
    let curves = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)
                .map_err(|e| QpiError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
            ErrorCurve::from_csv(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&curves))
}
