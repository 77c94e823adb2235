//! Aggregation of evaluation logs: per-group error tables, mean faces,
//! cumulative efficiency curves, alpha-sweep summaries and the JSONL log.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generators::GeneratedImage;
use crate::interrogator::{EvaluationRecord, Strategy, TrialResult};
use crate::search_space::{Condition, Gender, Race};
use crate::targets::{outcome_to_loss, Task, TaskLoss};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no determinate {task} evaluations to aggregate")]
    EmptyDenominator { task: &'static str },
    #[error("mean face of an empty image list")]
    NoImages,
    #[error("image {index} is {found_w}x{found_h}, expected {width}x{height}")]
    MixedDimensions {
        index: usize,
        width: u32,
        height: u32,
        found_w: u32,
        found_h: u32,
    },
    #[error("no trials for strategy {0}")]
    NoTrials(&'static str),
    #[error("trial {index} has {found} iterations, expected {expected}")]
    MismatchedLengths {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row of an error table. `rate_pct` is `None` when the group has no
/// determinate evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub group: String,
    pub numerator: usize,
    pub denominator: usize,
    pub rate_pct: Option<f64>,
}

impl RateRow {
    fn new(group: String, numerator: usize, denominator: usize) -> Self {
        let rate_pct = (denominator > 0).then(|| 100.0 * numerator as f64 / denominator as f64);
        Self {
            group,
            numerator,
            denominator,
            rate_pct,
        }
    }
}

/// Error rates for one task, per cell, per race, per gender and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub task: Task,
    pub cells: Vec<RateRow>,
    pub races: Vec<RateRow>,
    pub genders: Vec<RateRow>,
    pub overall: RateRow,
}

impl ErrorReport {
    pub fn rows(&self) -> impl Iterator<Item = &RateRow> {
        self.cells
            .iter()
            .chain(&self.races)
            .chain(&self.genders)
            .chain(std::iter::once(&self.overall))
    }

    pub fn race(&self, race: Race) -> &RateRow {
        &self.races[race.index()]
    }

    pub fn gender(&self, gender: Gender) -> &RateRow {
        &self.genders[gender.index()]
    }

    pub fn cell(&self, c: Condition) -> &RateRow {
        &self.cells[c.index()]
    }
}

fn cell_label(c: Condition) -> String {
    format!("{}/{}", c.race.label(), c.gender.label())
}

/// Groups `records` by their decoded condition and computes error rates for
/// `task` from the stored classifier outcomes. Invalid records and
/// indeterminate outcomes are left out of every denominator.
pub fn aggregate_rates(records: &[EvaluationRecord], task: Task) -> Result<ErrorReport, ReportError> {
    let mut num = [0usize; Condition::COUNT];
    let mut den = [0usize; Condition::COUNT];
    for r in records.iter().filter(|r| r.valid) {
        let Some(outcome) = &r.outcome else { continue };
        let k = r.theta.condition.index();
        match outcome_to_loss(outcome, &r.theta, task) {
            TaskLoss::Indeterminate => {}
            TaskLoss::Correct => den[k] += 1,
            TaskLoss::Failure => {
                den[k] += 1;
                num[k] += 1;
            }
        }
    }
    let total_den: usize = den.iter().sum();
    if total_den == 0 {
        return Err(ReportError::EmptyDenominator { task: task.label() });
    }

    let cells = Condition::all()
        .map(|c| RateRow::new(cell_label(c), num[c.index()], den[c.index()]))
        .collect();
    let races = Race::ALL
        .into_iter()
        .map(|race| {
            let (n, d) = Gender::ALL.into_iter().fold((0, 0), |(n, d), gender| {
                let k = Condition::new(race, gender).index();
                (n + num[k], d + den[k])
            });
            RateRow::new(race.label().to_string(), n, d)
        })
        .collect();
    let genders = Gender::ALL
        .into_iter()
        .map(|gender| {
            let (n, d) = Race::ALL.into_iter().fold((0, 0), |(n, d), race| {
                let k = Condition::new(race, gender).index();
                (n + num[k], d + den[k])
            });
            RateRow::new(gender.label().to_string(), n, d)
        })
        .collect();
    let overall = RateRow::new("overall".to_string(), num.iter().sum(), total_den);
    Ok(ErrorReport {
        task,
        cells,
        races,
        genders,
        overall,
    })
}

fn fmt_rate(rate: Option<f64>) -> String {
    rate.map(|r| format!("{r:.2}")).unwrap_or_default()
}

/// CSV with columns `task,group,numerator,denominator,rate_pct`; rates carry
/// two decimals and are blank for empty groups.
pub fn error_reports_csv(reports: &[ErrorReport]) -> String {
    let mut out = String::from("task,group,numerator,denominator,rate_pct\n");
    for rep in reports {
        for row in rep.rows() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                rep.task.label(),
                row.group,
                row.numerator,
                row.denominator,
                fmt_rate(row.rate_pct)
            );
        }
    }
    out
}

pub fn error_reports_json(reports: &[ErrorReport]) -> Result<String, ReportError> {
    Ok(serde_json::to_string_pretty(reports)? + "\n")
}

/// Per-pixel, per-channel mean of equally sized images, rounded half up.
pub fn mean_face(images: &[GeneratedImage]) -> Result<GeneratedImage, ReportError> {
    let first = images.first().ok_or(ReportError::NoImages)?;
    let (width, height) = (first.width, first.height);
    let mut sums = vec![0u64; first.pixels.len()];
    for (index, img) in images.iter().enumerate() {
        if img.width != width || img.height != height {
            return Err(ReportError::MixedDimensions {
                index,
                width,
                height,
                found_w: img.width,
                found_h: img.height,
            });
        }
        for (s, &p) in sums.iter_mut().zip(&img.pixels) {
            *s += p as u64;
        }
    }
    let n = images.len() as u64;
    // floor((s / n) + 1/2) in integer arithmetic
    let pixels = sums.into_iter().map(|s| ((2 * s + n) / (2 * n)) as u8).collect();
    Ok(GeneratedImage { width, height, pixels })
}

/// Cumulative failure counts for one strategy, summarized across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySeries {
    pub strategy: Strategy,
    pub trials: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCurve {
    pub series: Vec<EfficiencySeries>,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn series_from_counts(strategy: Strategy, counts: &[&[usize]]) -> Result<EfficiencySeries, ReportError> {
    let first = counts.first().ok_or(ReportError::NoTrials(strategy.label()))?;
    let len = first.len();
    if let Some((index, c)) = counts.iter().enumerate().find(|(_, c)| c.len() != len) {
        return Err(ReportError::MismatchedLengths {
            index,
            expected: len,
            found: c.len(),
        });
    }
    let mut column = vec![0.0; counts.len()];
    let (mut mean, mut std) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for i in 0..len {
        for (slot, c) in column.iter_mut().zip(counts) {
            *slot = c[i] as f64;
        }
        let (m, s) = mean_std(&column);
        mean.push(m);
        std.push(s);
    }
    Ok(EfficiencySeries {
        strategy,
        trials: counts.len(),
        mean,
        std,
    })
}

/// Per-iteration mean and standard deviation of cumulative failures, one
/// series per strategy present in `results`, in order of first appearance.
/// All trials must have the same number of evaluations.
pub fn efficiency_curve(results: &[TrialResult]) -> Result<EfficiencyCurve, ReportError> {
    let expected = results
        .first()
        .ok_or(ReportError::NoTrials("any"))?
        .cumulative_failures
        .len();
    if let Some((index, r)) = results
        .iter()
        .enumerate()
        .find(|(_, r)| r.cumulative_failures.len() != expected)
    {
        return Err(ReportError::MismatchedLengths {
            index,
            expected,
            found: r.cumulative_failures.len(),
        });
    }
    let mut order: Vec<Strategy> = Vec::new();
    for r in results {
        if !order.contains(&r.strategy) {
            order.push(r.strategy);
        }
    }
    let series = order
        .into_iter()
        .map(|s| {
            let counts: Vec<&[usize]> = results
                .iter()
                .filter(|r| r.strategy == s)
                .map(|r| r.cumulative_failures.as_slice())
                .collect();
            series_from_counts(s, &counts)
        })
        .collect::<Result<_, _>>()?;
    Ok(EfficiencyCurve { series })
}

/// CSV with columns `iteration,strategy,mean,std`; iterations count from 1.
pub fn efficiency_csv(curve: &EfficiencyCurve) -> String {
    let mut out = String::from("iteration,strategy,mean,std\n");
    for s in &curve.series {
        for (i, (m, sd)) in s.mean.iter().zip(&s.std).enumerate() {
            let _ = writeln!(out, "{},{},{m:.4},{sd:.4}", i + 1, s.strategy.label());
        }
    }
    out
}

/// Final failure counts at one alpha, summarized across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seeds: usize,
    pub iterations: usize,
    pub mean_failures: f64,
    pub std_failures: f64,
    pub mean_failure_pct: f64,
}

/// Summarizes `(alpha, trials)` groups by final failure count.
pub fn alpha_sweep_summary(groups: &[(f64, Vec<TrialResult>)]) -> Result<Vec<SweepRow>, ReportError> {
    groups
        .iter()
        .map(|(alpha, trials)| {
            let curve = efficiency_curve(trials)?;
            let iterations = trials[0].cumulative_failures.len();
            let finals: Vec<f64> = trials.iter().map(|t| t.total_failures() as f64).collect();
            let (mean, std) = mean_std(&finals);
            debug_assert_eq!(curve.series.len(), 1);
            Ok(SweepRow {
                alpha: *alpha,
                seeds: trials.len(),
                iterations,
                mean_failures: mean,
                std_failures: std,
                mean_failure_pct: if iterations == 0 {
                    0.0
                } else {
                    100.0 * mean / iterations as f64
                },
            })
        })
        .collect()
}

/// CSV with columns `alpha,seeds,iterations,mean_failures,std_failures,mean_failure_pct`.
pub fn alpha_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,seeds,iterations,mean_failures,std_failures,mean_failure_pct\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4}",
            r.alpha, r.seeds, r.iterations, r.mean_failures, r.std_failures, r.mean_failure_pct
        );
    }
    out
}

/// The alpha with the highest mean failure count; the first one wins ties.
pub fn best_alpha(rows: &[SweepRow]) -> Option<f64> {
    rows.iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.mean_failures >= r.mean_failures => Some(b),
            _ => Some(r),
        })
        .map(|r| r.alpha)
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Serializes records as JSON lines. Floats use the shortest representation
/// that parses back to the same value.
pub fn log_to_string(records: &[EvaluationRecord]) -> Result<String, ReportError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_log(records: &[EvaluationRecord], path: &Path) -> Result<(), ReportError> {
    write_atomic(path, log_to_string(records)?.as_bytes())
}

/// Reads a JSONL log. Blank lines are ignored; a malformed line fails with
/// its 1-based line number.
pub fn read_log(path: &Path) -> Result<Vec<EvaluationRecord>, ReportError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| ReportError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        records.push(rec);
    }
    Ok(records)
}
