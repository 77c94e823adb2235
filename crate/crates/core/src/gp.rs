//! Gaussian-process regression with a squared-exponential (RBF) kernel.
//!
//! The Cholesky factor is stored as packed lower-triangular rows so a fitted
//! model can absorb a new training point in `O(n^2)` by appending one row.
//! Row `i` of the factor depends only on rows `< i`, so appending gives the
//! same bits as refactorizing from scratch with the same jitter.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{squared_distance, UnitPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{points} training points but {targets} targets")]
    LengthMismatch { points: usize, targets: usize },
    #[error("at least {needed} training points required, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("kernel matrix not positive definite even with jitter {jitter:e}")]
    Factorization { jitter: f64 },
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            lengthscale: 0.2,
            signal_variance: 1.0,
            noise_variance: 0.1,
        }
    }
}

impl KernelParams {
    pub fn new(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self, GpError> {
        let p = Self {
            lengthscale,
            signal_variance,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let ok = self.lengthscale.is_finite()
            && self.lengthscale > 0.0
            && self.signal_variance.is_finite()
            && self.signal_variance > 0.0
            && self.noise_variance.is_finite()
            && self.noise_variance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(GpError::InvalidParams(format!("{self:?}")))
        }
    }

    #[inline]
    fn kernel_at_sq_dist(&self, d2: f64) -> f64 {
        self.signal_variance * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

/// `sigma_f^2 * exp(-|a-b|^2 / (2 l^2))`.
pub fn kernel_eval(a: &UnitPoint, b: &UnitPoint, p: &KernelParams) -> Result<f64, GpError> {
    if a.dim() != b.dim() {
        return Err(GpError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(p.kernel_at_sq_dist(squared_distance(a.coords(), b.coords())))
}

/// Log-spaced lengthscales crossed with signal and noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lengthscale_min: f64,
    pub lengthscale_max: f64,
    pub lengthscale_steps: usize,
    pub signal_variances: Vec<f64>,
    pub noise_variances: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lengthscale_min: 0.05,
            lengthscale_max: 1.0,
            lengthscale_steps: 16,
            signal_variances: vec![0.25, 1.0, 4.0],
            noise_variances: vec![0.01, 0.1, 0.5],
        }
    }
}

impl GridSpec {
    pub fn lengthscales(&self) -> Vec<f64> {
        let n = self.lengthscale_steps;
        if n == 1 {
            return vec![self.lengthscale_min];
        }
        let (lo, hi) = (self.lengthscale_min.ln(), self.lengthscale_max.ln());
        (0..n)
            .map(|k| (lo + (hi - lo) * k as f64 / (n - 1) as f64).exp())
            .collect()
    }

    /// Lengthscale-major enumeration of all combinations.
    pub fn expand(&self) -> Result<Vec<KernelParams>, GpError> {
        let mut grid = Vec::new();
        for l in self.lengthscales() {
            for &sf in &self.signal_variances {
                for &sn in &self.noise_variances {
                    grid.push(KernelParams::new(l, sf, sn)?);
                }
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

impl Posterior {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GpModel {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    params: KernelParams,
    jitter: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

#[inline]
fn row_start(i: usize) -> usize {
    i * (i + 1) / 2
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Appends row `i` of the factor; `kernel_row[j]` holds `k(x_i, x_j)` for `j <= i`.
/// Returns false when the pivot is not positive.
fn append_chol_row(chol: &mut Vec<f64>, i: usize, kernel_row: &[f64], diag_extra: f64) -> bool {
    let start = row_start(i);
    debug_assert_eq!(chol.len(), start);
    chol.resize(start + i + 1, 0.0);
    for j in 0..i {
        let rj = row_start(j);
        let s = kernel_row[j] - dot(&chol[start..start + j], &chol[rj..rj + j]);
        chol[start + j] = s / chol[rj + j];
    }
    let d = kernel_row[i] + diag_extra - dot(&chol[start..start + i], &chol[start..start + i]);
    if !d.is_finite() || d <= 0.0 {
        chol.truncate(start);
        return false;
    }
    chol[start + i] = d.sqrt();
    true
}

fn forward_solve(chol: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut v = vec![0.0; n];
    for i in 0..n {
        let r = row_start(i);
        v[i] = (b[i] - dot(&chol[r..r + i], &v[..i])) / chol[r + i];
    }
    v
}

fn backward_solve(chol: &[f64], v: &mut [f64]) {
    let n = v.len();
    for i in (0..n).rev() {
        let r = row_start(i);
        v[i] /= chol[r + i];
        let wi = v[i];
        for (vj, lij) in v[..i].iter_mut().zip(&chol[r..r + i]) {
            *vj -= lij * wi;
        }
    }
}

/// Factorizes `K + (sigma_n^2 + jitter) I` where `kernel(i, j)` gives `K_ij` for `j <= i`.
fn factorize(kernel: impl Fn(usize, usize) -> f64, n: usize, p: &KernelParams) -> Result<(Vec<f64>, f64), GpError> {
    let mut row = vec![0.0; n];
    let mut jitter = JITTER_START * p.signal_variance;
    let max_jitter = JITTER_MAX * p.signal_variance * (1.0 + 1e-9);
    loop {
        let mut chol = Vec::with_capacity(row_start(n));
        let mut ok = true;
        for i in 0..n {
            for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                *r = kernel(i, j);
            }
            if !append_chol_row(&mut chol, i, &row[..=i], p.noise_variance + jitter) {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok((chol, jitter));
        }
        let next = jitter * 10.0;
        if next > max_jitter {
            return Err(GpError::Factorization { jitter });
        }
        jitter = next;
    }
}

fn check_inputs(x: &[UnitPoint], y: &[f64]) -> Result<usize, GpError> {
    if x.len() != y.len() {
        return Err(GpError::LengthMismatch {
            points: x.len(),
            targets: y.len(),
        });
    }
    if x.is_empty() {
        return Err(GpError::TooFewPoints { needed: 1, got: 0 });
    }
    let dim = x[0].dim();
    for p in x {
        if p.dim() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                actual: p.dim(),
            });
        }
        if p.coords().iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("training input"));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("training target"));
    }
    Ok(dim)
}

impl GpModel {
    /// Fits the model, escalating jitter from `1e-8 sigma_f^2` by factors of
    /// ten up to `1e-2 sigma_f^2` when the factorization fails.
    pub fn fit(x: &[UnitPoint], y: &[f64], params: KernelParams) -> Result<Self, GpError> {
        params.validate()?;
        let dim = check_inputs(x, y)?;
        let flat: Vec<f64> = x.iter().flat_map(|p| p.coords().iter().copied()).collect();
        Self::fit_flat(dim, flat, y.to_vec(), params)
    }

    fn fit_flat(dim: usize, x: Vec<f64>, y: Vec<f64>, params: KernelParams) -> Result<Self, GpError> {
        let n = y.len();
        let pt = |i: usize| &x[i * dim..(i + 1) * dim];
        let (chol, jitter) = factorize(
            |i, j| params.kernel_at_sq_dist(squared_distance(pt(i), pt(j))),
            n,
            &params,
        )?;
        let mut alpha = forward_solve(&chol, &y);
        backward_solve(&chol, &mut alpha);
        Ok(Self {
            dim,
            x,
            y,
            params,
            jitter,
            chol,
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Dense lower-triangular factor, row-major `n x n`.
    pub fn cholesky_dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let r = row_start(i);
            out[i * n..i * n + i + 1].copy_from_slice(&self.chol[r..r + i + 1]);
        }
        out
    }

    /// Regularized kernel matrix `K + (sigma_n^2 + jitter) I`, row-major.
    pub fn regularized_kernel(&self) -> Vec<f64> {
        let n = self.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = self
                    .params
                    .kernel_at_sq_dist(squared_distance(self.point(i), self.point(j)));
            }
            k[i * n + i] += self.params.noise_variance + self.jitter;
        }
        k
    }

    /// Same factorization with new targets.
    pub fn with_targets(&self, y: &[f64]) -> Result<Self, GpError> {
        if y.len() != self.len() {
            return Err(GpError::LengthMismatch {
                points: self.len(),
                targets: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("training target"));
        }
        let mut alpha = forward_solve(&self.chol, y);
        backward_solve(&self.chol, &mut alpha);
        Ok(Self {
            y: y.to_vec(),
            alpha,
            ..self.clone()
        })
    }

    /// Adds one training point and replaces all targets. Equivalent to `fit`
    /// on the extended data; falls back to a full refit if the appended pivot
    /// fails at the current jitter.
    pub fn extend(mut self, x_new: &UnitPoint, y: &[f64]) -> Result<Self, GpError> {
        if x_new.dim() != self.dim {
            return Err(GpError::DimensionMismatch {
                expected: self.dim,
                actual: x_new.dim(),
            });
        }
        let n = self.len();
        if y.len() != n + 1 {
            return Err(GpError::LengthMismatch {
                points: n + 1,
                targets: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) || x_new.coords().iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("training data"));
        }
        self.x.extend_from_slice(x_new.coords());
        let row: Vec<f64> = (0..=n)
            .map(|j| {
                self.params
                    .kernel_at_sq_dist(squared_distance(x_new.coords(), self.point(j)))
            })
            .collect();
        if !append_chol_row(&mut self.chol, n, &row, self.params.noise_variance + self.jitter) {
            return Self::fit_flat(self.dim, self.x, y.to_vec(), self.params);
        }
        self.y = y.to_vec();
        self.alpha = forward_solve(&self.chol, &self.y);
        backward_solve(&self.chol, &mut self.alpha);
        Ok(self)
    }

    /// `k(q, X)` for every training point.
    pub fn cross_kernel(&self, q: &[f64]) -> Result<Vec<f64>, GpError> {
        if q.len() != self.dim {
            return Err(GpError::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        Ok((0..self.len())
            .map(|i| self.params.kernel_at_sq_dist(squared_distance(q, self.point(i))))
            .collect())
    }

    pub(crate) fn mean_from_cross(&self, k: &[f64]) -> f64 {
        dot(k, &self.alpha)
    }

    pub(crate) fn variance_from_cross(&self, k: &[f64]) -> f64 {
        let v = forward_solve(&self.chol, k);
        (self.params.signal_variance - dot(&v, &v)).max(0.0)
    }

    /// Cheap upper bound on the posterior variance using the single most
    /// informative training point.
    pub(crate) fn variance_upper_bound(&self, k: &[f64]) -> f64 {
        let diag = self.params.signal_variance + self.params.noise_variance + self.jitter;
        let kmax = k.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        (self.params.signal_variance - kmax * kmax / diag).max(0.0)
    }

    pub fn posterior(&self, q: &UnitPoint) -> Result<Posterior, GpError> {
        let k = self.cross_kernel(q.coords())?;
        Ok(Posterior {
            mean: self.mean_from_cross(&k),
            variance: self.variance_from_cross(&k),
        })
    }

    /// `-1/2 y^T alpha - sum log L_ii - n/2 log(2 pi)`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len();
        let quad = dot(&self.y, &self.alpha);
        let log_det_half: f64 = (0..n).map(|i| self.chol[row_start(i) + i].ln()).sum();
        -0.5 * quad - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln()
    }
}

/// Returns the grid element with the highest log marginal likelihood; the
/// earliest index wins ties. Elements whose factorization fails are skipped.
pub fn select_hyperparams(x: &[UnitPoint], y: &[f64], grid: &[KernelParams]) -> Result<KernelParams, GpError> {
    if grid.is_empty() {
        return Err(GpError::EmptyGrid);
    }
    let dim = check_inputs(x, y)?;
    if x.len() < 2 {
        return Err(GpError::TooFewPoints {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len();
    let mut sq = vec![0.0; row_start(n)];
    for i in 0..n {
        for j in 0..=i {
            sq[row_start(i) + j] = squared_distance(x[i].coords(), x[j].coords());
        }
    }
    let flat: Vec<f64> = x.iter().flat_map(|p| p.coords().iter().copied()).collect();
    let mut best: Option<(f64, KernelParams)> = None;
    let mut last_err = None;
    // exp(-d^2 / (2 l^2)) for the current lengthscale, reused across variances
    let mut corr = vec![0.0; sq.len()];
    let mut corr_lengthscale = f64::NAN;
    for p in grid {
        p.validate()?;
        if p.lengthscale != corr_lengthscale {
            let l = p.lengthscale;
            for (c, d2) in corr.iter_mut().zip(&sq) {
                *c = (-d2 / (2.0 * l * l)).exp();
            }
            corr_lengthscale = l;
        }
        let sf2 = p.signal_variance;
        let fitted = factorize(|i, j| sf2 * corr[row_start(i) + j], n, p).map(|(chol, jitter)| {
            let mut alpha = forward_solve(&chol, y);
            backward_solve(&chol, &mut alpha);
            GpModel {
                dim,
                x: flat.clone(),
                y: y.to_vec(),
                params: *p,
                jitter,
                chol,
                alpha,
            }
        });
        match fitted {
            Ok(model) => {
                let lml = model.log_marginal_likelihood();
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, *p));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((_, p)), _) => Ok(p),
        (None, Some(e)) => Err(e),
        (None, None) => Err(GpError::EmptyGrid),
    }
}
