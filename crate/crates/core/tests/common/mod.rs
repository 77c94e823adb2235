//! Independent dense linear-algebra oracles and fixtures shared by the
//! integration tests. Nothing here calls into the library's factorization
//! code.
#![allow(dead_code)]

pub mod invariants;
pub mod stub;

use bias_interrogator::gp::KernelParams;
use bias_interrogator::interrogator::EvaluationRecord;
use bias_interrogator::search_space::{Condition, Gender, Race, UnitPoint};
use rand::Rng;
use rand_distr::StandardNormal;

/// Row-major `n x n` matrix.
pub struct Dense {
    pub n: usize,
    pub a: Vec<f64>,
}

impl Dense {
    pub fn zeros(n: usize) -> Self {
        Self { n, a: vec![0.0; n * n] }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
    }
}

/// LU decomposition with partial pivoting. Returns the packed factors, the
/// row permutation and the permutation sign.
fn lu(m: &Dense) -> (Vec<f64>, Vec<usize>, f64) {
    let n = m.n;
    let mut a = m.a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
            .unwrap();
        if p != k {
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
            perm.swap(k, p);
            sign = -sign;
        }
        let piv = a[k * n + k];
        assert!(piv != 0.0, "singular matrix in oracle");
        for i in k + 1..n {
            let f = a[i * n + k] / piv;
            a[i * n + k] = f;
            for c in k + 1..n {
                a[i * n + c] -= f * a[k * n + c];
            }
        }
    }
    (a, perm, sign)
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
pub fn solve(m: &Dense, b: &[f64]) -> Vec<f64> {
    let n = m.n;
    let (a, perm, _) = lu(m);
    let mut y: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        for c in 0..i {
            y[i] -= a[i * n + c] * y[c];
        }
    }
    for i in (0..n).rev() {
        for c in i + 1..n {
            y[i] -= a[i * n + c] * y[c];
        }
        y[i] /= a[i * n + i];
    }
    y
}

/// `log |det m|` from the LU diagonal.
pub fn log_abs_det(m: &Dense) -> f64 {
    let (a, _, _) = lu(m);
    (0..m.n).map(|i| a[i * m.n + i].abs().ln()).sum()
}

/// Plain dense Cholesky, used only to draw correlated samples.
pub fn cholesky(m: &Dense) -> Dense {
    let n = m.n;
    let mut l = Dense::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.at(j, j));
            }
        }
    }
    l
}

pub fn rbf(a: &[f64], b: &[f64], lengthscale: f64, signal_variance: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    signal_variance * (-d2 / (2.0 * lengthscale * lengthscale)).exp()
}

/// `K(X, X) + diag * I`.
pub fn kernel_matrix(xs: &[Vec<f64>], lengthscale: f64, signal_variance: f64, diag: f64) -> Dense {
    let n = xs.len();
    let mut k = Dense::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v = rbf(&xs[i], &xs[j], lengthscale, signal_variance) + if i == j { diag } else { 0.0 };
            k.set(i, j, v);
        }
    }
    k
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect()
}

pub fn unit_points(xs: &[Vec<f64>]) -> Vec<UnitPoint> {
    xs.iter().map(|x| UnitPoint::new(x.clone()).unwrap()).collect()
}

/// A valid record for `condition` whose classifier saw (or missed) a face
/// and predicted `gender`.
pub fn record(
    iteration: usize,
    condition: bias_interrogator::search_space::Condition,
    face_detected: bool,
    gender: Option<bias_interrogator::search_space::Gender>,
) -> bias_interrogator::interrogator::EvaluationRecord {
    use bias_interrogator::interrogator::{EvaluationRecord, RecordLoss};
    use bias_interrogator::search_space::GeneratorParams;
    use bias_interrogator::targets::ClassificationOutcome;
    let x = UnitPoint::new(vec![
        (condition.race.index() as f64 + 0.5) / 4.0,
        condition.gender.index() as f64 * 0.5 + 0.25,
    ])
    .unwrap();
    EvaluationRecord {
        iteration,
        x,
        theta: GeneratorParams {
            condition,
            latent: vec![0.0; 4],
        },
        loss_c: if face_detected {
            RecordLoss::Zero
        } else {
            RecordLoss::One
        },
        objective: Some(if face_detected { 0.0 } else { 1.0 }),
        outcome: Some(ClassificationOutcome::new(face_detected, gender, String::new())),
        classifier_payload: String::new(),
        valid: true,
        error: None,
        timestamp: chrono::DateTime::UNIX_EPOCH,
    }
}

pub struct Oracle {
    pub alpha: Vec<f64>,
    pub lml: f64,
    pub k: Dense,
}

/// Direct solve of the same regularized system the model reports
/// (`K + (sigma_n^2 + jitter) I`).
pub fn oracle(xs: &[Vec<f64>], y: &[f64], p: &KernelParams, jitter: f64) -> Oracle {
    let k = kernel_matrix(xs, p.lengthscale, p.signal_variance, p.noise_variance + jitter);
    let alpha = solve(&k, y);
    let n = y.len() as f64;
    let lml = -0.5 * dot(y, &alpha) - 0.5 * log_abs_det(&k) - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Oracle { alpha, lml, k }
}

pub fn oracle_posterior(xs: &[Vec<f64>], o: &Oracle, p: &KernelParams, q: &[f64]) -> (f64, f64) {
    let kq: Vec<f64> = xs.iter().map(|x| rbf(q, x, p.lengthscale, p.signal_variance)).collect();
    let mean = dot(&kq, &o.alpha);
    let v = solve(&o.k, &kq);
    (mean, (p.signal_variance - dot(&kq, &v)).max(0.0))
}

/// Mean of `max(0, mean + sd * Z - f_best - xi)` over `samples` normal draws.
pub fn monte_carlo_ei<R: Rng>(rng: &mut R, mean: f64, sd: f64, f_best: f64, xi: f64, samples: usize) -> f64 {
    let mut sum = 0.0;
    for _ in 0..samples {
        let z: f64 = rng.sample(StandardNormal);
        sum += (mean + sd * z - f_best - xi).max(0.0);
    }
    sum / samples as f64
}

/// `failures[r]` of `totals[r]` records per race fail face detection,
/// split evenly across genders.
pub fn constructed_log(totals: [usize; 4], failures: [usize; 4]) -> Vec<EvaluationRecord> {
    let mut out = Vec::new();
    for race in Race::ALL {
        let (n, f) = (totals[race.index()], failures[race.index()]);
        for k in 0..n {
            let gender = if k % 2 == 0 { Gender::Man } else { Gender::Woman };
            let detected = k >= f;
            out.push(record(
                out.len(),
                Condition::new(race, gender),
                detected,
                detected.then_some(gender),
            ));
        }
    }
    out
}
