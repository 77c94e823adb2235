//! Trial invariants recomputed from the records alone. Each check returns a
//! description of the first violation it finds.

use bias_interrogator::acquisition::{diversity_term, FailureSet};
use bias_interrogator::generators::SyntheticGenerator;
use bias_interrogator::gp::{GpModel, KernelParams};
use bias_interrogator::interrogator::{
    run_random_baseline, run_trial, EvaluationRecord, RecordLoss, Strategy, TrialConfig, TrialResult,
};
use bias_interrogator::search_space::{SpaceConfig, UnitPoint};
use bias_interrogator::targets::{CellRates, PlantedBiasSpec, PlantedClassifier, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small randomized trial: configuration, classifier and strategy all
/// drawn from `seed`.
pub struct RandomTrial {
    pub cfg: TrialConfig,
    pub spec: PlantedBiasSpec,
    pub strategy: Strategy,
}

pub fn random_trial(seed: u64) -> RandomTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_search = rng.random_range(1..=8);
    let d_z = rng.random_range(d_search..=d_search + 12);
    let iterations = rng.random_range(30..=60);
    let mut cfg = TrialConfig {
        iterations,
        initial_design: rng.random_range(2..=10),
        seed: rng.random(),
        task: if rng.random_bool(0.5) {
            Task::FaceDetection
        } else {
            Task::GenderDetection
        },
        space: SpaceConfig {
            d_search,
            d_z,
            ..SpaceConfig::default()
        },
        ..TrialConfig::default()
    };
    cfg.acquisition.alpha = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0][rng.random_range(0..6)];
    cfg.acquisition.candidate_count = 256;
    let mut spec = PlantedBiasSpec::default_for_dim(cfg.space.dim());
    for cell in spec.cell_rates.iter_mut() {
        *cell = CellRates {
            face: rng.random_range(0.0..0.5),
            gender: rng.random_range(0.0..0.5),
        };
    }
    spec.hash_seed = rng.random();
    let strategy = if rng.random_bool(0.7) {
        Strategy::Bayesian
    } else {
        Strategy::Random
    };
    RandomTrial { cfg, spec, strategy }
}

pub fn run(t: &RandomTrial) -> TrialResult {
    let mut generator = SyntheticGenerator::new(8, t.cfg.space.d_z);
    let mut classifier = PlantedClassifier::new(t.spec.clone()).expect("valid planted spec");
    match t.strategy {
        Strategy::Bayesian => run_trial(&t.cfg, &mut generator, &mut classifier),
        Strategy::Random => run_random_baseline(&t.cfg, &mut generator, &mut classifier),
    }
    .expect("synthetic trials never abort")
}

fn dist(a: &UnitPoint, b: &UnitPoint) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `(1 - alpha) * L + alpha * min(1, min_f |x - f| / sqrt(D))` over the
/// given failure locations, written out directly.
fn objective_oracle(loss: f64, x: &UnitPoint, failures: &[&UnitPoint], alpha: f64) -> f64 {
    let div = if failures.is_empty() {
        1.0
    } else {
        let m = failures.iter().map(|f| dist(x, f)).fold(f64::INFINITY, f64::min);
        (m / (x.dim() as f64).sqrt()).min(1.0)
    };
    (1.0 - alpha) * loss + alpha * div
}

pub fn check_records(cfg: &TrialConfig, result: &TrialResult) -> Result<(), String> {
    let recs = &result.records;
    if recs.len() != cfg.iterations {
        return Err(format!("{} records for a budget of {}", recs.len(), cfg.iterations));
    }
    let mut count = 0;
    for (i, r) in recs.iter().enumerate() {
        if r.iteration != i {
            return Err(format!("record {i} carries iteration {}", r.iteration));
        }
        if r.x.dim() != cfg.space.dim() || r.x.coords().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("record {i} lies outside the unit cube"));
        }
        if r.theta.latent.len() != cfg.space.d_z {
            return Err(format!("record {i} latent has length {}", r.theta.latent.len()));
        }
        if r.loss_c == RecordLoss::One {
            count += 1;
        }
        let c = result.cumulative_failures[i];
        if c != count {
            return Err(format!("cumulative count {c} at {i}, recount gives {count}"));
        }
        if i > 0 && c < result.cumulative_failures[i - 1] {
            return Err(format!("cumulative count decreases at {i}"));
        }
    }
    if result.cumulative_failures.len() != recs.len() {
        return Err("cumulative series length differs from record count".into());
    }
    Ok(())
}

/// Every failure-set member is a record with loss 1, and every loss-1 record
/// is in the set, in evaluation order.
pub fn check_failure_set(result: &TrialResult) -> Result<(), String> {
    let expected: Vec<&EvaluationRecord> = result.records.iter().filter(|r| r.loss_c == RecordLoss::One).collect();
    let members = result.failure_set.points();
    if members.len() != expected.len() {
        return Err(format!(
            "{} set members vs {} loss-1 records",
            members.len(),
            expected.len()
        ));
    }
    for (m, r) in members.iter().zip(&expected) {
        let rec = &result.records[m.iteration];
        if rec.loss_c != RecordLoss::One {
            return Err(format!(
                "member from iteration {} has loss {:?}",
                m.iteration, rec.loss_c
            ));
        }
        if m.iteration != r.iteration || m.x != r.x {
            return Err(format!("member for iteration {} out of order or moved", m.iteration));
        }
    }
    Ok(())
}

/// Stored objectives against the directly computed composite objective.
/// For the optimizer every record reflects the final refresh, which saw the
/// failures among the first `n - 1` records; the last record was scored
/// against the same set. The random baseline never refreshes, so each record
/// is scored against the failures before it.
pub fn check_objectives(cfg: &TrialConfig, result: &TrialResult) -> Result<(), String> {
    let alpha = cfg.alpha();
    let recs = &result.records;
    let n = recs.len();
    let failures_before = |k: usize| -> Vec<&UnitPoint> {
        recs[..k]
            .iter()
            .filter(|r| r.loss_c == RecordLoss::One)
            .map(|r| &r.x)
            .collect()
    };
    for (i, r) in recs.iter().enumerate() {
        let Some(obj) = r.objective else {
            if r.valid {
                return Err(format!("valid record {i} without objective"));
            }
            continue;
        };
        let against = match result.strategy {
            Strategy::Bayesian => failures_before(n - 1),
            Strategy::Random => failures_before(i),
        };
        let loss = if r.loss_c == RecordLoss::One { 1.0 } else { 0.0 };
        let want = objective_oracle(loss, &r.x, &against, alpha);
        if (obj - want).abs() > 1e-12 {
            return Err(format!("record {i}: objective {obj}, direct computation {want}"));
        }
        if !(0.0..=1.0).contains(&obj) {
            return Err(format!("record {i}: objective {obj} outside [0, 1]"));
        }
    }
    Ok(())
}

/// The diversity term at fixed probes never increases as failures are added.
pub fn check_diversity_monotone(result: &TrialResult, seed: u64) -> Result<(), String> {
    let dim = result.records[0].x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<UnitPoint> = (0..16)
        .map(|_| UnitPoint::new((0..dim).map(|_| rng.random::<f64>()).collect()).unwrap())
        .chain(result.records.iter().take(8).map(|r| r.x.clone()))
        .collect();
    let mut set = FailureSet::new();
    let mut prev: Vec<f64> = probes.iter().map(|p| diversity_term(p, &set).unwrap()).collect();
    for f in result.failure_set.iter() {
        set.push(f.iteration, f.x.clone());
        for (k, p) in probes.iter().enumerate() {
            let d = diversity_term(p, &set).unwrap();
            if d > prev[k] {
                return Err(format!(
                    "diversity rose from {} to {d} after adding failure {}",
                    prev[k], f.iteration
                ));
            }
            prev[k] = d;
        }
    }
    Ok(())
}

/// Posterior variance at fixed probes never increases as the trial's points
/// are added one at a time.
pub fn check_variance_shrinks(result: &TrialResult, seed: u64) -> Result<(), String> {
    let pts: Vec<&EvaluationRecord> = result.records.iter().filter(|r| r.valid).take(40).collect();
    let dim = pts[0].x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<UnitPoint> = (0..12)
        .map(|_| UnitPoint::new((0..dim).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    let params = KernelParams::default();
    let y: Vec<f64> = pts.iter().map(|r| r.objective.unwrap_or(0.0)).collect();
    let mut model = GpModel::fit(&[pts[0].x.clone()], &y[..1], params).map_err(|e| e.to_string())?;
    let mut prev: Vec<f64> = probes.iter().map(|p| model.posterior(p).unwrap().variance).collect();
    for k in 1..pts.len() {
        model = model.extend(&pts[k].x, &y[..=k]).map_err(|e| e.to_string())?;
        for (j, p) in probes.iter().enumerate() {
            let v = model.posterior(p).unwrap().variance;
            if v > prev[j] + 1e-10 {
                return Err(format!("variance rose from {} to {v} after {} points", prev[j], k + 1));
            }
            prev[j] = v;
        }
    }
    Ok(())
}

/// Runs every invariant on one randomized trial.
pub fn check_all(seed: u64) -> Result<(), String> {
    let t = random_trial(seed);
    let result = run(&t);
    check_records(&t.cfg, &result)?;
    check_failure_set(&result)?;
    check_objectives(&t.cfg, &result)?;
    check_diversity_monotone(&result, seed)?;
    check_variance_shrinks(&result, seed)?;
    Ok(())
}
