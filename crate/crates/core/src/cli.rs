//! Command-line front end. `dispatch` parses arguments, runs the requested
//! subcommand and maps failures to exit codes: 0 success, 1 usage or
//! configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{GeneratorKind, RunConfig, TargetKind};
use crate::generators::{encode_png, GeneratedImage, Generator, GeneratorEndpoint, RemoteGenerator};
use crate::interrogator::{
    run_random_baseline_with, run_trial_with, Clock, EvaluationRecord, LogicalClock, RecordLoss, Strategy, SystemClock,
    TrialHooks, TrialResult,
};
use crate::reporting::{
    aggregate_rates, alpha_sweep_csv, alpha_sweep_summary, best_alpha, efficiency_csv, efficiency_curve,
    error_reports_csv, error_reports_json, log_to_string, mean_face, read_log, write_atomic, ErrorReport, ReportError,
};
use crate::search_space::{SearchSpace, SpaceConfig, UnitPoint};
use crate::targets::{Classifier, HttpClassifier, PlantedClassifier, Task};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "interrogator",
    version,
    about = "Search a generative face model for classifier failures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one Bayesian-optimization trial and write its log and reports.
    Interrogate(RunArgs),
    /// Run one uniform random-probing trial and write its log and reports.
    Baseline(RunArgs),
    /// Run optimizer and random trials over several seeds and write efficiency curves.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Trials run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run optimizer trials for each alpha over several seeds and summarize final failure counts.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated alpha values.
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1.0")]
        alphas: Vec<f64>,
        /// Number of seeds per alpha, starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Trials run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Recompute error tables from an evaluation log.
    Report {
        /// JSONL evaluation log written by a previous run.
        #[arg(long)]
        log: PathBuf,
        /// Directory for error_report.csv and error_report.json; tables go to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a generator service: health request plus one generate round trip.
    GenTest {
        /// Base URL of the generator service.
        #[arg(long)]
        endpoint: String,
        /// Seed for the probe point sent to the service.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-request timeout in seconds.
        #[arg(long, default_value_t = 30.0)]
        timeout_s: f64,
    },
}

/// Overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default, Args)]
struct RunArgs {
    /// TOML configuration file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Classifier under test.
    #[arg(long, value_enum)]
    target: Option<TargetKind>,
    /// Classifier endpoint for `--target http`.
    #[arg(long)]
    target_url: Option<String>,
    /// Image source.
    #[arg(long, value_enum)]
    generator: Option<GeneratorKind>,
    /// Generator service base URL for `--generator remote`.
    #[arg(long)]
    generator_url: Option<String>,
    /// Total evaluation budget, warm-start probes included.
    #[arg(long)]
    iterations: Option<usize>,
    /// Number of Latin-hypercube warm-start probes.
    #[arg(long)]
    initial_design: Option<usize>,
    /// Weight of the diversity term in the objective, in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Seed for the design, candidate and baseline streams.
    #[arg(long)]
    seed: Option<u64>,
    /// face or gender
    #[arg(long)]
    task: Option<Task>,
    /// Re-select kernel hyperparameters every this many steps; 0 keeps them fixed.
    #[arg(long)]
    refit_every: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(config_err)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.target {
            cfg.target.kind = v;
        }
        if let Some(v) = &self.target_url {
            cfg.target.url = v.clone();
        }
        if let Some(v) = self.generator {
            cfg.generator.kind = v;
        }
        if let Some(v) = &self.generator_url {
            cfg.generator.url = v.clone();
        }
        if let Some(v) = self.iterations {
            cfg.trial.iterations = v;
        }
        if let Some(v) = self.initial_design {
            cfg.trial.initial_design = v;
        }
        if let Some(v) = self.alpha {
            cfg.acquisition.alpha = v;
        }
        if let Some(v) = self.seed {
            cfg.trial.seed = v;
        }
        if let Some(v) = self.task {
            cfg.trial.task = v;
        }
        if let Some(v) = self.refit_every {
            cfg.gp.refit_every = v;
        }
        if let Some(v) = &self.out {
            cfg.report.out_dir = v.clone();
        }
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }
}

const OPTIONAL_KEYS_HELP: &str = "\
Optional keys without a default value:
  target.auth_header_env   name of the environment variable holding the Authorization header
  target.cell_rates        eight {face, gender} tables in race-major order (black/man, black/woman, ...)
  target.hotspot_center    list of unit-cube coordinates; defaults to the centre of the Black/Man cell";

fn command() -> clap::Command {
    let defaults = RunConfig::default().to_toml().unwrap_or_default();
    Cli::command().after_long_help(format!(
        "Configuration file keys and their defaults (--config FILE):\n\n{defaults}\n{OPTIONAL_KEYS_HELP}"
    ))
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Interrogate(args) => run_single(&args.resolve()?, Strategy::Bayesian),
        Command::Baseline(args) => run_single(&args.resolve()?, Strategy::Random),
        Command::Compare { run, seeds, jobs } => run_compare(&run.resolve()?, seeds, jobs),
        Command::SweepAlpha {
            run,
            alphas,
            seeds,
            jobs,
        } => run_sweep(&run.resolve()?, &alphas, seeds, jobs),
        Command::Report { log, out } => run_report(&log, out.as_deref()),
        Command::GenTest {
            endpoint,
            seed,
            timeout_s,
        } => run_gen_test(&endpoint, seed, timeout_s),
    }
}

fn build_generator(cfg: &RunConfig) -> Result<Box<dyn Generator>, CliError> {
    Ok(match cfg.generator.kind {
        GeneratorKind::Synthetic => Box::new(cfg.synthetic_generator().map_err(config_err)?),
        GeneratorKind::Remote => {
            let ep = cfg.generator_endpoint().map_err(config_err)?;
            Box::new(RemoteGenerator::connect(ep).map_err(runtime_err)?)
        }
    })
}

fn build_classifier(cfg: &RunConfig) -> Result<Box<dyn Classifier>, CliError> {
    Ok(match cfg.target.kind {
        TargetKind::Synthetic => {
            Box::new(PlantedClassifier::new(cfg.planted_spec().map_err(config_err)?).map_err(config_err)?)
        }
        TargetKind::Http => Box::new(HttpClassifier::new(cfg.api_endpoint().map_err(config_err)?).map_err(config_err)?),
    })
}

fn fully_synthetic(cfg: &RunConfig) -> bool {
    cfg.target.kind == TargetKind::Synthetic && cfg.generator.kind == GeneratorKind::Synthetic
}

/// Images grouped by the trial task's outcome.
#[derive(Default)]
struct FaceSets {
    correct: Vec<GeneratedImage>,
    failure: Vec<GeneratedImage>,
}

/// Runs one trial. Fully synthetic runs use a logical clock so that logs
/// are reproducible byte for byte.
fn run_one(cfg: &RunConfig, strategy: Strategy, keep_images: bool) -> Result<(TrialResult, FaceSets), CliError> {
    let mut generator = build_generator(cfg)?;
    let mut classifier = build_classifier(cfg)?;
    let trial = cfg.trial_config();
    let mut logical = LogicalClock::default();
    let mut system = SystemClock;
    let clock: &mut dyn Clock = if fully_synthetic(cfg) {
        &mut logical
    } else {
        &mut system
    };
    let mut faces = FaceSets::default();
    let iterations = trial.iterations;
    let mut observe = |r: &EvaluationRecord, img: Option<&GeneratedImage>| {
        if (r.iteration + 1).is_multiple_of(50) {
            log::info!(
                "{} seed {}: {}/{iterations} evaluations",
                strategy.label(),
                trial.seed,
                r.iteration + 1
            );
        }
        if let (true, Some(img)) = (keep_images, img) {
            match r.loss_c {
                RecordLoss::Zero => faces.correct.push(img.clone()),
                RecordLoss::One => faces.failure.push(img.clone()),
                RecordLoss::Indeterminate | RecordLoss::Invalid => {}
            }
        }
    };
    let hooks = TrialHooks {
        clock,
        observer: Some(&mut observe),
    };
    let result = match strategy {
        Strategy::Bayesian => run_trial_with(&trial, generator.as_mut(), classifier.as_mut(), hooks),
        Strategy::Random => run_random_baseline_with(&trial, generator.as_mut(), classifier.as_mut(), hooks),
    }
    .map_err(runtime_err)?;
    Ok((result, faces))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

/// Error tables for every task that has determinate evaluations.
fn reports_for(records: &[EvaluationRecord]) -> Result<Vec<ErrorReport>, CliError> {
    let mut reports = Vec::new();
    for task in [Task::FaceDetection, Task::GenderDetection] {
        match aggregate_rates(records, task) {
            Ok(r) => reports.push(r),
            Err(ReportError::EmptyDenominator { task }) => {
                log::warn!("no determinate {task} evaluations; table skipped")
            }
            Err(e) => return Err(e.into()),
        }
    }
    if reports.is_empty() {
        return Err(CliError::Runtime("no valid evaluations to report".into()));
    }
    Ok(reports)
}

fn write_reports(dir: &Path, reports: &[ErrorReport]) -> Result<(), CliError> {
    write_atomic(&dir.join("error_report.csv"), error_reports_csv(reports).as_bytes())?;
    write_atomic(&dir.join("error_report.json"), error_reports_json(reports)?.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime_err)? + "\n";
    Ok(write_atomic(path, text.as_bytes())?)
}

#[derive(Serialize)]
struct TrialSummary {
    strategy: Strategy,
    task: Task,
    seed: u64,
    alpha: f64,
    iterations: usize,
    valid: usize,
    failures: usize,
    distinct_failure_cells: usize,
}

fn summarize(cfg: &RunConfig, result: &TrialResult) -> TrialSummary {
    let mut cells: Vec<usize> = result
        .records
        .iter()
        .filter(|r| r.loss_c.is_failure())
        .map(|r| r.theta.condition.index())
        .collect();
    cells.sort_unstable();
    cells.dedup();
    TrialSummary {
        strategy: result.strategy,
        task: cfg.trial.task,
        seed: cfg.trial.seed,
        alpha: cfg.acquisition.alpha,
        iterations: result.records.len(),
        valid: result.records.iter().filter(|r| r.valid).count(),
        failures: result.total_failures(),
        distinct_failure_cells: cells.len(),
    }
}

fn run_single(cfg: &RunConfig, strategy: Strategy) -> Result<(), CliError> {
    let dir = &cfg.report.out_dir;
    create_dir(dir)?;
    let (result, faces) = run_one(cfg, strategy, cfg.report.mean_faces)?;

    write_atomic(&dir.join("config.toml"), cfg.to_toml().map_err(runtime_err)?.as_bytes())?;
    write_atomic(&dir.join("log.jsonl"), log_to_string(&result.records)?.as_bytes())?;
    write_reports(dir, &reports_for(&result.records)?)?;
    let curve = efficiency_curve(std::slice::from_ref(&result))?;
    write_atomic(&dir.join("efficiency.csv"), efficiency_csv(&curve).as_bytes())?;
    let summary = summarize(cfg, &result);
    write_json(&dir.join("summary.json"), &summary)?;
    for (name, images) in [
        ("mean_face_correct.png", &faces.correct),
        ("mean_face_failure.png", &faces.failure),
    ] {
        if images.is_empty() {
            continue;
        }
        let png = encode_png(&mean_face(images)?).map_err(runtime_err)?;
        write_atomic(&dir.join(name), &png)?;
    }
    println!(
        "{} trial, seed {}: {} failures in {} evaluations; outputs in {}",
        strategy.label(),
        summary.seed,
        summary.failures,
        summary.iterations,
        dir.display()
    );
    Ok(())
}

fn seeded(cfg: &RunConfig, seed_offset: usize, alpha: Option<f64>) -> RunConfig {
    let mut c = cfg.clone();
    c.trial.seed = cfg.trial.seed.wrapping_add(seed_offset as u64);
    if let Some(a) = alpha {
        c.acquisition.alpha = a;
    }
    c
}

/// Runs every job on a pool of `threads`; results keep the job order.
fn run_parallel(jobs: Vec<(RunConfig, Strategy)>, threads: usize) -> Result<Vec<TrialResult>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(runtime_err)?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, strategy)| run_one(cfg, *strategy, false).map(|(r, _)| r))
            .collect()
    })
}

fn run_compare(cfg: &RunConfig, seeds: usize, jobs: usize) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let dir = &cfg.report.out_dir;
    create_dir(dir)?;
    let work: Vec<(RunConfig, Strategy)> = [Strategy::Bayesian, Strategy::Random]
        .into_iter()
        .flat_map(|s| (0..seeds).map(move |k| (seeded(cfg, k, None), s)))
        .collect();
    let results = run_parallel(work, jobs)?;
    let curve = efficiency_curve(&results)?;
    write_atomic(&dir.join("efficiency.csv"), efficiency_csv(&curve).as_bytes())?;
    write_json(&dir.join("efficiency.json"), &curve)?;
    for s in &curve.series {
        let last = s.mean.len().saturating_sub(1);
        println!(
            "{}: mean {:.2} failures (std {:.2}) over {} seeds",
            s.strategy.label(),
            s.mean[last],
            s.std[last],
            s.trials
        );
    }
    Ok(())
}

fn run_sweep(cfg: &RunConfig, alphas: &[f64], seeds: usize, jobs: usize) -> Result<(), CliError> {
    if seeds == 0 || alphas.is_empty() {
        return Err(CliError::Config("--alphas and --seeds must be non-empty".into()));
    }
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(CliError::Config(format!("alpha {a} outside [0, 1]")));
        }
    }
    let dir = &cfg.report.out_dir;
    create_dir(dir)?;
    let work: Vec<(RunConfig, Strategy)> = alphas
        .iter()
        .flat_map(|&a| (0..seeds).map(move |k| (seeded(cfg, k, Some(a)), Strategy::Bayesian)))
        .collect();
    let mut results = run_parallel(work, jobs)?.into_iter();
    let groups: Vec<(f64, Vec<TrialResult>)> = alphas
        .iter()
        .map(|&a| (a, results.by_ref().take(seeds).collect()))
        .collect();
    let rows = alpha_sweep_summary(&groups)?;
    write_atomic(&dir.join("alpha_sweep.csv"), alpha_sweep_csv(&rows).as_bytes())?;
    write_json(&dir.join("alpha_sweep.json"), &rows)?;
    for r in &rows {
        println!(
            "alpha {}: mean {:.2} failures (std {:.2})",
            r.alpha, r.mean_failures, r.std_failures
        );
    }
    if let Some(best) = best_alpha(&rows) {
        println!("best alpha: {best}");
    }
    Ok(())
}

fn run_report(log: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let records = read_log(log)?;
    let reports = reports_for(&records)?;
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_reports(dir, &reports)?;
            println!("wrote error_report.csv and error_report.json to {}", dir.display());
        }
        None => print!("{}", error_reports_csv(&reports)),
    }
    Ok(())
}

fn run_gen_test(url: &str, seed: u64, timeout_s: f64) -> Result<(), CliError> {
    let mut ep = GeneratorEndpoint::new(url);
    ep.timeout = std::time::Duration::try_from_secs_f64(timeout_s).map_err(config_err)?;
    ep.retries = 0;
    let mut generator = RemoteGenerator::connect(ep).map_err(runtime_err)?;
    let health = generator.health().clone();
    println!(
        "health: status {}, resolution {}, latent_dim {}",
        health.status, health.resolution, health.latent_dim
    );
    let space_cfg = SpaceConfig {
        d_z: health.latent_dim,
        d_search: SpaceConfig::default().d_search.min(health.latent_dim),
        ..SpaceConfig::default()
    };
    let space = SearchSpace::new(space_cfg).map_err(runtime_err)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x = UnitPoint::new((0..space.dim()).map(|_| rng.random::<f64>()).collect()).map_err(runtime_err)?;
    let theta = space.decode(&x).map_err(runtime_err)?;
    let img = generator.generate(&theta).map_err(runtime_err)?;
    println!(
        "generate: {} {} -> {}x{} image",
        theta.condition.race, theta.condition.gender, img.width, img.height
    );
    Ok(())
}
