//! The interrogation loop: evaluate a warm-start design, then repeatedly
//! refresh the adaptive objective, fit the surrogate, and probe the EI
//! maximizer. Also the uniform random-probing baseline.

use chrono::{DateTime, TimeDelta, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    composite_objective, draw_candidates, propose_next, AcquisitionConfig, AcquisitionError, FailureSet,
};
use crate::generators::{GeneratedImage, Generator};
use crate::gp::{select_hyperparams, GpError, GpModel, GridSpec, KernelParams};
use crate::search_space::{GeneratorParams, SearchSpace, SpaceConfig, SpaceError, UnitPoint};
use crate::targets::{outcome_to_loss, ClassificationOutcome, Classifier, Probe, Task, TaskLoss};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("invalid trial configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error("aborted at iteration {iteration}: {invalid} of {total} evaluations invalid (last cause: {last_cause})")]
    TooManyInvalid {
        iteration: usize,
        invalid: usize,
        total: usize,
        last_cause: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSettings {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// Hyperparameters are re-selected every this many optimizer steps; 0 disables.
    pub refit_every: usize,
    pub grid: GridSpec,
}

impl Default for GpSettings {
    fn default() -> Self {
        let k = KernelParams::default();
        Self {
            lengthscale: k.lengthscale,
            signal_variance: k.signal_variance,
            noise_variance: k.noise_variance,
            refit_every: 0,
            grid: GridSpec::default(),
        }
    }
}

impl GpSettings {
    pub fn kernel(&self) -> Result<KernelParams, GpError> {
        KernelParams::new(self.lengthscale, self.signal_variance, self.noise_variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub iterations: usize,
    pub initial_design: usize,
    pub seed: u64,
    pub task: Task,
    pub space: SpaceConfig,
    pub gp: GpSettings,
    pub acquisition: AcquisitionConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            initial_design: 16,
            seed: 0,
            task: Task::FaceDetection,
            space: SpaceConfig::default(),
            gp: GpSettings::default(),
            acquisition: AcquisitionConfig::default(),
        }
    }
}

impl TrialConfig {
    pub fn alpha(&self) -> f64 {
        self.acquisition.alpha
    }

    pub fn validate(&self) -> Result<(), TrialError> {
        if self.iterations == 0 {
            return Err(TrialError::Config("iterations must be positive".into()));
        }
        if self.initial_design == 0 {
            return Err(TrialError::Config("initial_design must be positive".into()));
        }
        if self.initial_design >= self.iterations {
            return Err(TrialError::Config(format!(
                "initial_design ({}) must be smaller than iterations ({})",
                self.initial_design, self.iterations
            )));
        }
        self.space.validate()?;
        self.gp.kernel()?;
        self.gp.grid.expand()?;
        self.acquisition.validate()?;
        Ok(())
    }
}

/// Loss recorded for one evaluation. Serialized as `0`, `1`,
/// `"indeterminate"` or `"invalid"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordLoss {
    Zero,
    One,
    Indeterminate,
    Invalid,
}

impl RecordLoss {
    pub fn from_task_loss(l: TaskLoss) -> Self {
        match l {
            TaskLoss::Correct => RecordLoss::Zero,
            TaskLoss::Failure => RecordLoss::One,
            TaskLoss::Indeterminate => RecordLoss::Indeterminate,
        }
    }

    pub fn is_failure(self) -> bool {
        self == RecordLoss::One
    }
}

impl Serialize for RecordLoss {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RecordLoss::Zero => s.serialize_u8(0),
            RecordLoss::One => s.serialize_u8(1),
            RecordLoss::Indeterminate => s.serialize_str("indeterminate"),
            RecordLoss::Invalid => s.serialize_str("invalid"),
        }
    }
}

impl<'de> Deserialize<'de> for RecordLoss {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = RecordLoss;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("0, 1, \"indeterminate\" or \"invalid\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<RecordLoss, E> {
                match v {
                    0 => Ok(RecordLoss::Zero),
                    1 => Ok(RecordLoss::One),
                    _ => Err(E::invalid_value(de::Unexpected::Unsigned(v), &self)),
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<RecordLoss, E> {
                u64::try_from(v)
                    .map_err(|_| E::invalid_value(de::Unexpected::Signed(v), &self))
                    .and_then(|u| self.visit_u64(u))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<RecordLoss, E> {
                match v {
                    "indeterminate" => Ok(RecordLoss::Indeterminate),
                    "invalid" => Ok(RecordLoss::Invalid),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// One probe of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRecord {
    pub iteration: usize,
    pub x: UnitPoint,
    pub theta: GeneratorParams,
    pub loss_c: RecordLoss,
    /// Composite objective at evaluation time; `None` for invalid records.
    pub objective: Option<f64>,
    pub outcome: Option<ClassificationOutcome>,
    pub classifier_payload: String,
    pub valid: bool,
    pub error: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Bayesian,
    Random,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Bayesian => "bayesian",
            Strategy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub strategy: Strategy,
    pub records: Vec<EvaluationRecord>,
    pub failure_set: FailureSet,
    pub cumulative_failures: Vec<usize>,
    /// Kernel parameters in force when each optimizer step was proposed.
    pub kernel_history: Vec<KernelParams>,
}

impl TrialResult {
    pub fn total_failures(&self) -> usize {
        self.cumulative_failures.last().copied().unwrap_or(0)
    }
}

pub trait Clock {
    fn now(&mut self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&mut self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: `start`, then one `step` later on every call.
#[derive(Debug, Clone)]
pub struct LogicalClock {
    next: DateTime<Utc>,
    step: TimeDelta,
}

impl LogicalClock {
    pub fn new(start: DateTime<Utc>, step: TimeDelta) -> Self {
        Self { next: start, step }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new(DateTime::UNIX_EPOCH, TimeDelta::seconds(1))
    }
}

impl Clock for LogicalClock {
    fn now(&mut self) -> DateTime<Utc> {
        let t = self.next;
        self.next += self.step;
        t
    }
}

/// Called once per evaluation with the record and the generated image, if any.
pub type RecordObserver<'a> = dyn FnMut(&EvaluationRecord, Option<&GeneratedImage>) + 'a;

/// Latin hypercube sample of `n` points in `[0, 1]^dim`.
pub fn initial_design(n: usize, dim: usize, seed: u64) -> Result<Vec<UnitPoint>, TrialError> {
    if n == 0 {
        return Err(TrialError::Config("initial design needs at least one point".into()));
    }
    let mut rng = stream(seed, DESIGN_STREAM);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut bins: Vec<usize> = (0..n).collect();
        bins.shuffle(&mut rng);
        cols.push(
            bins.into_iter()
                .map(|b| ((b as f64 + rng.random::<f64>()) / n as f64).min(1.0))
                .collect(),
        );
    }
    Ok((0..n)
        .map(|i| UnitPoint::new(cols.iter().map(|c| c[i]).collect()).expect("LHS values lie in the cube"))
        .collect())
}

/// Recomputes every valid record's objective against the current failure set.
pub fn refresh_objectives(
    records: &[EvaluationRecord],
    failures: &FailureSet,
    alpha: f64,
) -> Result<Vec<EvaluationRecord>, TrialError> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.valid {
                r.objective = Some(composite_objective(r.loss_c.is_failure(), &r.x, failures, alpha)?);
            }
            Ok(r)
        })
        .collect()
}

const DESIGN_STREAM: u64 = 1;
const CANDIDATE_STREAM: u64 = 2;
const BASELINE_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Evaluator<'a> {
    cfg: &'a TrialConfig,
    space: SearchSpace,
    generator: &'a mut dyn Generator,
    classifier: &'a mut dyn Classifier,
    clock: &'a mut dyn Clock,
    observer: Option<&'a mut RecordObserver<'a>>,
    records: Vec<EvaluationRecord>,
    failures: FailureSet,
    cumulative: Vec<usize>,
    invalid: usize,
    last_cause: String,
}

impl Evaluator<'_> {
    fn evaluate(&mut self, x: UnitPoint) -> Result<(), TrialError> {
        let iteration = self.records.len();
        let theta = self.space.decode(&x)?;
        let mut image = None;
        let result = self
            .generator
            .generate(&theta)
            .map_err(|e| format!("generator: {e}"))
            .and_then(|img| {
                let probe = Probe {
                    x: &x,
                    theta: &theta,
                    image: &img,
                };
                let out = self.classifier.classify(&probe).map_err(|e| format!("classifier: {e}"));
                image = Some(img);
                out
            });
        let timestamp = self.clock.now();
        let record = match result {
            Ok(outcome) => {
                let loss_c = RecordLoss::from_task_loss(outcome_to_loss(&outcome, &theta, self.cfg.task));
                let objective = composite_objective(loss_c.is_failure(), &x, &self.failures, self.cfg.alpha())?;
                EvaluationRecord {
                    iteration,
                    x,
                    theta,
                    loss_c,
                    objective: Some(objective),
                    classifier_payload: outcome.raw_payload.clone(),
                    outcome: Some(outcome),
                    valid: true,
                    error: None,
                    timestamp,
                }
            }
            Err(cause) => {
                log::warn!("evaluation {iteration} invalid: {cause}");
                self.invalid += 1;
                self.last_cause = cause.clone();
                EvaluationRecord {
                    iteration,
                    x,
                    theta,
                    loss_c: RecordLoss::Invalid,
                    objective: None,
                    outcome: None,
                    classifier_payload: String::new(),
                    valid: false,
                    error: Some(cause),
                    timestamp,
                }
            }
        };
        if record.loss_c.is_failure() {
            self.failures.push(iteration, record.x.clone());
        }
        self.cumulative.push(self.failures.len());
        if let Some(obs) = self.observer.as_mut() {
            obs(&record, image.as_ref());
        }
        self.records.push(record);
        self.check_invalid_budget()
    }

    fn check_invalid_budget(&self) -> Result<(), TrialError> {
        let total = self.records.len();
        if total >= self.cfg.initial_design && 2 * self.invalid > total {
            return Err(TrialError::TooManyInvalid {
                iteration: total - 1,
                invalid: self.invalid,
                total,
                last_cause: self.last_cause.clone(),
            });
        }
        Ok(())
    }
}

/// Optional hooks for a trial run.
pub struct TrialHooks<'a> {
    pub clock: &'a mut dyn Clock,
    pub observer: Option<&'a mut RecordObserver<'a>>,
}

fn start<'a>(
    cfg: &'a TrialConfig,
    generator: &'a mut dyn Generator,
    classifier: &'a mut dyn Classifier,
    hooks: TrialHooks<'a>,
) -> Result<Evaluator<'a>, TrialError> {
    cfg.validate()?;
    let space = SearchSpace::new(cfg.space.clone())?;
    if generator.latent_dim() != cfg.space.d_z {
        return Err(TrialError::Config(format!(
            "generator latent dimension {} does not match space.d_z {}",
            generator.latent_dim(),
            cfg.space.d_z
        )));
    }
    Ok(Evaluator {
        cfg,
        space,
        generator,
        classifier,
        clock: hooks.clock,
        observer: hooks.observer,
        records: Vec::with_capacity(cfg.iterations),
        failures: FailureSet::new(),
        cumulative: Vec::with_capacity(cfg.iterations),
        invalid: 0,
        last_cause: String::new(),
    })
}

/// Tracks the surrogate across iterations so unchanged hyperparameters only
/// cost an incremental update.
struct Surrogate {
    params: KernelParams,
    model: Option<GpModel>,
    grid: Vec<KernelParams>,
}

impl Surrogate {
    fn update(&mut self, x: &[UnitPoint], y: &[f64], refit: bool) -> Result<&GpModel, TrialError> {
        if refit && x.len() >= 2 {
            let chosen = select_hyperparams(x, y, &self.grid)?;
            if chosen != self.params {
                log::debug!("hyperparameters -> {chosen:?}");
                self.params = chosen;
                self.model = None;
            }
        }
        let next = match self.model.take() {
            Some(m) if m.len() == x.len() => m.with_targets(y)?,
            Some(m) if m.len() + 1 == x.len() => m.extend(&x[x.len() - 1], y)?,
            _ => GpModel::fit(x, y, self.params)?,
        };
        Ok(self.model.insert(next))
    }
}

pub fn run_trial(
    cfg: &TrialConfig,
    generator: &mut dyn Generator,
    classifier: &mut dyn Classifier,
) -> Result<TrialResult, TrialError> {
    let mut clock = LogicalClock::default();
    run_trial_with(
        cfg,
        generator,
        classifier,
        TrialHooks {
            clock: &mut clock,
            observer: None,
        },
    )
}

/// Bayesian-optimization trial.
pub fn run_trial_with<'a>(
    cfg: &'a TrialConfig,
    generator: &'a mut dyn Generator,
    classifier: &'a mut dyn Classifier,
    hooks: TrialHooks<'a>,
) -> Result<TrialResult, TrialError> {
    let mut ev = start(cfg, generator, classifier, hooks)?;
    let dim = cfg.space.dim();
    for x in initial_design(cfg.initial_design, dim, cfg.seed)? {
        ev.evaluate(x)?;
    }

    let mut rng = stream(cfg.seed, CANDIDATE_STREAM);
    let mut surrogate = Surrogate {
        params: cfg.gp.kernel()?,
        model: None,
        grid: cfg.gp.grid.expand()?,
    };
    let mut kernel_history = Vec::new();
    for step in 0..cfg.iterations - cfg.initial_design {
        let refreshed = refresh_objectives(&ev.records, &ev.failures, cfg.alpha())?;
        ev.records = refreshed;
        let (xs, ys): (Vec<UnitPoint>, Vec<f64>) = ev
            .records
            .iter()
            .filter(|r| r.valid)
            .map(|r| (r.x.clone(), r.objective.expect("valid records carry an objective")))
            .unzip();
        let next = if xs.is_empty() {
            draw_candidates(&mut rng, 1, dim).remove(0)
        } else {
            let refit = cfg.gp.refit_every > 0 && step % cfg.gp.refit_every == 0;
            let model = surrogate.update(&xs, &ys, refit)?;
            propose_next(model, &ev.failures, &cfg.acquisition, &mut rng)?
        };
        kernel_history.push(surrogate.params);
        ev.evaluate(next)?;
    }
    Ok(TrialResult {
        strategy: Strategy::Bayesian,
        records: ev.records,
        failure_set: ev.failures,
        cumulative_failures: ev.cumulative,
        kernel_history,
    })
}

pub fn run_random_baseline(
    cfg: &TrialConfig,
    generator: &mut dyn Generator,
    classifier: &mut dyn Classifier,
) -> Result<TrialResult, TrialError> {
    let mut clock = LogicalClock::default();
    run_random_baseline_with(
        cfg,
        generator,
        classifier,
        TrialHooks {
            clock: &mut clock,
            observer: None,
        },
    )
}

/// Every probe an independent uniform draw; the failure set is only recorded.
pub fn run_random_baseline_with<'a>(
    cfg: &'a TrialConfig,
    generator: &'a mut dyn Generator,
    classifier: &'a mut dyn Classifier,
    hooks: TrialHooks<'a>,
) -> Result<TrialResult, TrialError> {
    let mut ev = start(cfg, generator, classifier, hooks)?;
    let mut rng = stream(cfg.seed, BASELINE_STREAM);
    for _ in 0..cfg.iterations {
        let x = draw_candidates(&mut rng, 1, cfg.space.dim()).remove(0);
        ev.evaluate(x)?;
    }
    Ok(TrialResult {
        strategy: Strategy::Random,
        records: ev.records,
        failure_set: ev.failures,
        cumulative_failures: ev.cumulative,
        kernel_history: Vec::new(),
    })
}
