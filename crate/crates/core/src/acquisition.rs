//! Diversity-augmented objective and Expected-Improvement proposals.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF};
use thiserror::Error;

use crate::gp::{GpError, GpModel};
use crate::search_space::{squared_distance, standard_normal, UnitPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcquisitionError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("non-finite input to expected improvement")]
    NonFinite,
    #[error("negative standard deviation {0}")]
    NegativeStdDev(f64),
    #[error("candidate_count must be at least 1")]
    NoCandidates,
    #[error("invalid acquisition config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// A point whose evaluation was a misclassification, with the iteration that found it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailurePoint {
    pub iteration: usize,
    pub x: UnitPoint,
}

/// Ordered set of failure points that drives the diversity term.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureSet {
    points: Vec<FailurePoint>,
}

impl FailureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, iteration: usize, x: UnitPoint) {
        self.points.push(FailurePoint { iteration, x });
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FailurePoint> {
        self.points.iter()
    }

    pub fn points(&self) -> &[FailurePoint] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub alpha: f64,
    pub xi: f64,
    #[serde(rename = "candidates")]
    pub candidate_count: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            xi: 0.01,
            candidate_count: 2048,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<(), AcquisitionError> {
        check_alpha(self.alpha)?;
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(AcquisitionError::InvalidConfig(format!(
                "xi must be >= 0, got {}",
                self.xi
            )));
        }
        if self.candidate_count == 0 {
            return Err(AcquisitionError::NoCandidates);
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), AcquisitionError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(AcquisitionError::AlphaOutOfRange(alpha))
    }
}

/// Minimum distance from `x` to the failure set, divided by `sqrt(D)`.
/// An empty set yields 1.
pub fn diversity_term(x: &UnitPoint, failures: &FailureSet) -> Result<f64, AcquisitionError> {
    let mut best = f64::INFINITY;
    for f in failures.iter() {
        if f.x.dim() != x.dim() {
            return Err(AcquisitionError::DimensionMismatch {
                expected: x.dim(),
                actual: f.x.dim(),
            });
        }
        best = best.min(squared_distance(x.coords(), f.x.coords()));
    }
    if best.is_infinite() {
        return Ok(1.0);
    }
    Ok((best.sqrt() / (x.dim() as f64).sqrt()).min(1.0))
}

/// `(1 - alpha) * L_c + alpha * diversity_term(x, failures)`.
pub fn composite_objective(
    misclassified: bool,
    x: &UnitPoint,
    failures: &FailureSet,
    alpha: f64,
) -> Result<f64, AcquisitionError> {
    check_alpha(alpha)?;
    let loss = if misclassified { 1.0 } else { 0.0 };
    let value = (1.0 - alpha) * loss + alpha * diversity_term(x, failures)?;
    Ok(value.clamp(0.0, 1.0))
}

#[inline]
fn ei_unchecked(mean: f64, sd: f64, f_best: f64, xi: f64) -> f64 {
    let improvement = mean - f_best - xi;
    if sd <= 0.0 {
        return improvement.max(0.0);
    }
    let n = standard_normal();
    let z = improvement / sd;
    (improvement * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

/// Expected improvement of a Gaussian with mean `mean` and standard deviation
/// `sd` over the incumbent `f_best` plus margin `xi`.
pub fn expected_improvement(mean: f64, sd: f64, f_best: f64, xi: f64) -> Result<f64, AcquisitionError> {
    if ![mean, sd, f_best, xi].iter().all(|v| v.is_finite()) {
        return Err(AcquisitionError::NonFinite);
    }
    if sd < 0.0 {
        return Err(AcquisitionError::NegativeStdDev(sd));
    }
    Ok(ei_unchecked(mean, sd, f_best, xi))
}

/// Draws `count` uniform cube points of dimension `dim` from `rng`.
pub fn draw_candidates<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Vec<UnitPoint> {
    (0..count)
        .map(|_| {
            let coords: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            UnitPoint::new(coords).expect("uniform draws lie in [0, 1)")
        })
        .collect()
}

/// Result of scoring a fixed candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub index: usize,
    pub point: UnitPoint,
    pub expected_improvement: f64,
}

/// Exact argmax of EI over `candidates`, lowest index winning ties.
///
/// Candidates are visited in order of an upper bound on their EI (posterior
/// mean plus a one-point bound on the variance) and the scan stops once the
/// bound drops below the best exact value, so the answer equals the
/// exhaustive argmax.
pub fn argmax_expected_improvement(
    model: &GpModel,
    candidates: &[UnitPoint],
    xi: f64,
) -> Result<Proposal, AcquisitionError> {
    if candidates.is_empty() {
        return Err(AcquisitionError::NoCandidates);
    }
    if !(xi.is_finite() && xi >= 0.0) {
        return Err(AcquisitionError::NonFinite);
    }
    let f_best = model.targets().iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut scored = Vec::with_capacity(candidates.len());
    let mut kernels = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let k = model.cross_kernel(c.coords())?;
        let mean = model.mean_from_cross(&k);
        let sd_bound = model.variance_upper_bound(&k).sqrt() * (1.0 + 1e-9) + 1e-12;
        let bound = ei_unchecked(mean, sd_bound, f_best, xi) * (1.0 + 1e-10) + f64::MIN_POSITIVE;
        scored.push((bound, mean, i));
        kernels.push(k);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));

    let mut best: Option<(f64, usize)> = None;
    for &(bound, mean, i) in &scored {
        if let Some((best_ei, _)) = best {
            if bound < best_ei {
                break;
            }
        }
        let sd = model.variance_from_cross(&kernels[i]).sqrt();
        let ei = ei_unchecked(mean, sd, f_best, xi);
        best = match best {
            Some((b, j)) if ei < b || (ei == b && j < i) => Some((b, j)),
            _ => Some((ei, i)),
        };
    }
    let (ei, index) = best.expect("at least one candidate scored");
    Ok(Proposal {
        index,
        point: candidates[index].clone(),
        expected_improvement: ei,
    })
}

/// EI for every candidate, in order. Used as a brute-force reference.
pub fn expected_improvement_all(
    model: &GpModel,
    candidates: &[UnitPoint],
    xi: f64,
) -> Result<Vec<f64>, AcquisitionError> {
    let f_best = model.targets().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .map(|c| {
            let post = model.posterior(c)?;
            expected_improvement(post.mean, post.std_dev(), f_best, xi)
        })
        .collect()
}

/// Draws `cfg.candidate_count` uniform candidates from `rng` and returns the
/// EI maximizer, where the incumbent is the best training target.
pub fn propose_next<R: Rng + ?Sized>(
    model: &GpModel,
    failures: &FailureSet,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> Result<UnitPoint, AcquisitionError> {
    cfg.validate()?;
    if let Some(f) = failures.iter().find(|f| f.x.dim() != model.dim()) {
        return Err(AcquisitionError::DimensionMismatch {
            expected: model.dim(),
            actual: f.x.dim(),
        });
    }
    let candidates = draw_candidates(rng, cfg.candidate_count, model.dim());
    Ok(argmax_expected_improvement(model, &candidates, cfg.xi)?.point)
}
