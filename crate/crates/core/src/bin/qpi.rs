//! Command-line front end: `qpi simulate|infer|evaluate|pipeline|aggregate|selftest`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qpi_core::config::{parse_grid, RunConfig, DEFAULT_GRID};
use qpi_core::data::{Dataset, TruthTable};
use qpi_core::error::{QpiError, Result};
use qpi_core::evaluation::{bloch_state, trace_distance};
use qpi_core::hankel::{block_hankel, ho_kalman_exact};
use qpi_core::inference::{infer, InferenceOptions};
use qpi_core::model::{random_model, Model};
use qpi_core::runner::{self, PipelineOptions};

#[derive(Parser)]
#[command(name = "qpi", version, about = "Quantum process identification from time-resolved tomography data")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Number of independent replicates for `pipeline`.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Evaluation grid START:STOP:STEP (inclusive).
    #[arg(long, global = true)]
    grid: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario: writes dataset.qpd and truth.qpt.
    Simulate,
    /// Infer a model from a dataset: writes model.qpm, dimension.txt and infer.log.
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        /// Fit this dimension instead of estimating it.
        #[arg(long)]
        dimension: Option<usize>,
        /// Stop after progressive block fitting.
        #[arg(long)]
        no_final_fit: bool,
    },
    /// Score a model against a truth table: writes errors.csv.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Dataset for raw-tomography errors at measured times.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Simulate, infer and evaluate `--runs` replicates with seeds seed+j.
    Pipeline {
        /// Worker threads (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Merge per-run errors.csv files by t: writes aggregate.csv.
    Aggregate {
        #[arg(required = true)]
        curves: Vec<PathBuf>,
    },
    /// Quick internal consistency checks.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            QpiError::Io(io) => QpiError::Config(format!("{}: {io}", p.display())),
            e => e,
        }),
        None => Err(QpiError::Config("this command needs --config".into())),
    }
}

fn grid(cli: &Cli, cfg: Option<&RunConfig>) -> Result<Vec<u64>> {
    match (&cli.grid, cfg) {
        (Some(g), _) => parse_grid(g),
        (None, Some(c)) => c.grid(),
        (None, None) => parse_grid(DEFAULT_GRID),
    }
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn simulate(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let grid = grid(cli, Some(&cfg))?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let (dataset, truth) = runner::simulate(&cfg, seed, &grid)?;
    runner::create_dir(&cli.out)?;
    dataset.write(&cli.out.join(runner::DATASET_FILE))?;
    truth.write(&cli.out.join(runner::TRUTH_FILE))?;
    println!(
        "{}: {} experiments over {} times, seed {seed}",
        cfg.scenario_name()?,
        dataset.records().len(),
        dataset.schedule().t_set().len()
    );
    Ok(())
}

fn infer_cmd(cli: &Cli, dataset: &Path, dimension: Option<usize>, no_final_fit: bool) -> Result<()> {
    let mut opts = match &cli.config {
        Some(_) => load_config(cli)?.inference.options()?,
        None => InferenceOptions::default(),
    };
    if dimension.is_some() {
        opts.fixed_dimension = dimension;
    }
    opts.run_stage4 = !no_final_fit;
    let data = Dataset::read(dataset)?;
    let result = infer(&data, &opts)?;
    runner::write_inference(&cli.out, &result)?;
    print_warnings(&result.warnings);
    println!(
        "d_hat = {}, d = {}, phi = {:.4e}{}",
        result.d_estimate,
        result.d_final,
        result.stage3.phi_last(),
        result.final_fit.as_ref().map(|f| format!(", psi = {:.4}", f.psi)).unwrap_or_default()
    );
    Ok(())
}

fn evaluate_cmd(cli: &Cli, model: &Path, truth: &Path, dataset: Option<&Path>) -> Result<()> {
    let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
    let grid = grid(cli, cfg.as_ref())?;
    let model = Model::load(model)?;
    let truth = TruthTable::read(truth)?;
    let data = dataset.map(Dataset::read).transpose()?;
    let (curve, warnings) = runner::evaluate(&model, &truth, &grid, data.as_ref())?;
    print_warnings(&warnings);
    runner::create_dir(&cli.out)?;
    std::fs::write(cli.out.join(runner::ERRORS_FILE), curve.to_csv())?;
    println!("{} grid points, mean error {:.6}", curve.rows.len(), curve.mean_qpi(0, u64::MAX));
    Ok(())
}

fn pipeline_cmd(cli: &Cli, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(cli)?;
    let popts = PipelineOptions {
        runs: cli.runs.unwrap_or(1),
        workers: workers.unwrap_or_else(rayon::current_num_threads),
        seed_base: cli.seed.unwrap_or(cfg.seed),
        grid: grid(cli, Some(&cfg))?,
        out: Some(cli.out.clone()),
    };
    let (summary, _) = runner::pipeline(&cfg, &popts)?;
    for r in &summary.runs {
        match (&r.error, r.d) {
            (Some(e), _) => eprintln!("run {}: failed: {e}", r.run),
            (None, Some(d)) => println!(
                "run {}: seed {}, d = {d}, mean error {:.6}",
                r.run,
                r.seed,
                r.mean_qpi_error.unwrap_or(f64::NAN)
            ),
            (None, None) => {}
        }
    }
    println!(
        "majority d = {}, mean error {:.6}",
        summary.majority_d.map(|d| d.to_string()).unwrap_or_else(|| "-".into()),
        summary.mean_qpi_error.unwrap_or(f64::NAN)
    );
    if summary.failed_runs > 0 {
        return Err(QpiError::Numeric(format!("{} of {} runs failed", summary.failed_runs, summary.runs.len())));
    }
    Ok(())
}

fn aggregate_cmd(cli: &Cli, curves: &[PathBuf]) -> Result<()> {
    let text = runner::aggregate_files(curves)?;
    runner::create_dir(&cli.out)?;
    std::fs::write(cli.out.join(runner::AGGREGATE_FILE), text)?;
    println!("merged {} curves", curves.len());
    Ok(())
}

fn selftest() -> Result<bool> {
    let mut ok = true;
    let mut report = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let truth = random_model(3, 2, 3, seed)?;
        let offsets: Vec<u64> = (0..4).collect();
        let f = |t: u64| truth.predict(t).expect("random models predict");
        let h = block_hankel(&f, 2, 3, &offsets, &offsets, 0);
        let hs = block_hankel(&f, 2, 3, &offsets, &offsets, 1);
        let fit = ho_kalman_exact(&h, &hs, 2, 3, 3)?;
        for t in [0u64, 10, 100] {
            worst = worst.max((fit.predict(t)? - truth.predict(t)?).abs().max());
        }
    }
    report("exact realization", worst < 1e-8, format!("max error {worst:.2e}"));
    let d = trace_distance(&bloch_state(1.0, 0.5, 0.5), &bloch_state(0.0, 0.5, 0.5))?;
    report("trace distance", (d - 1.0).abs() < 1e-12, format!("antipodal states at {d}"));
    let n = parse_grid(DEFAULT_GRID)?.len();
    report("grid", n == 221, format!("{DEFAULT_GRID} has {n} points"));
    let truth = random_model(2, 2, 3, 11)?;
    let restored = Model::from_json(&truth.to_json())?;
    report("model round trip", restored == truth, "serialized model restores exactly".into());
    Ok(ok)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate => simulate(cli),
        Command::Infer { dataset, dimension, no_final_fit } => infer_cmd(cli, dataset, *dimension, *no_final_fit),
        Command::Evaluate { model, truth, dataset } => evaluate_cmd(cli, model, truth, dataset.as_deref()),
        Command::Pipeline { workers } => pipeline_cmd(cli, *workers),
        Command::Aggregate { curves } => aggregate_cmd(cli, curves),
        Command::Selftest => {
            if selftest()? {
                Ok(())
            } else {
                Err(QpiError::Numeric("self-test failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
