//! The continuous search domain explored by the optimizer and its decoding
//! into generator conditions and latent vectors.
//!
//! A search point is a `D = 2 + d_search` dimensional vector in the unit cube.
//! The first coordinate selects the race bin, the second the gender bin, and
//! the remaining `d_search` coordinates are pushed through the standard normal
//! inverse CDF and then expanded into the generator's `d_z`-dimensional latent
//! space by a fixed, seeded matrix with orthonormal columns.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("coordinate {index} = {value} lies outside the unit interval")]
    OutOfCube { index: usize, value: f64 },
    #[error("invalid space configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { kind: &'static str, label: String },
}

/// Race groups, in the order used for the race bins of the first coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Race {
    Black,
    SouthAsian,
    NortheastAsian,
    White,
}

impl Race {
    pub const ALL: [Race; 4] = [Race::Black, Race::SouthAsian, Race::NortheastAsian, Race::White];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Wire label used by the generator protocol and in reports.
    pub fn label(self) -> &'static str {
        match self {
            Race::Black => "black",
            Race::SouthAsian => "south_asian",
            Race::NortheastAsian => "northeast_asian",
            Race::White => "white",
        }
    }

    pub fn from_label(label: &str) -> Result<Self, SpaceError> {
        Race::ALL
            .into_iter()
            .find(|r| r.label() == label)
            .ok_or_else(|| SpaceError::UnknownLabel {
                kind: "race",
                label: label.to_string(),
            })
    }

    /// Quartile bins: `[0,.25)`, `[.25,.5)`, `[.5,.75)`, `[.75,1]`.
    pub fn from_unit(u: f64) -> Self {
        let bin = ((u * 4.0).floor() as usize).min(3);
        Race::ALL[bin]
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Man,
    Woman,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Man, Gender::Woman];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Gender::Man => "man",
            Gender::Woman => "woman",
        }
    }

    pub fn from_label(label: &str) -> Result<Self, SpaceError> {
        Gender::ALL
            .into_iter()
            .find(|g| g.label() == label)
            .ok_or_else(|| SpaceError::UnknownLabel {
                kind: "gender",
                label: label.to_string(),
            })
    }

    /// Half bins: `[0,.5)` is `Man`, `[.5,1]` is `Woman`.
    pub fn from_unit(u: f64) -> Self {
        if u < 0.5 {
            Gender::Man
        } else {
            Gender::Woman
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Gender::Man => Gender::Woman,
            Gender::Woman => Gender::Man,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A (race, gender) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub race: Race,
    pub gender: Gender,
}

impl Condition {
    pub const COUNT: usize = 8;

    pub fn new(race: Race, gender: Gender) -> Self {
        Self { race, gender }
    }

    /// All eight cells in race-major order.
    pub fn all() -> impl Iterator<Item = Condition> {
        Race::ALL
            .into_iter()
            .flat_map(|race| Gender::ALL.into_iter().map(move |gender| Condition { race, gender }))
    }

    pub fn index(self) -> usize {
        self.race.index() * 2 + self.gender.index()
    }

    pub fn one_hot(self) -> [f64; Self::COUNT] {
        let mut v = [0.0; Self::COUNT];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.race, self.gender)
    }
}

/// A point in the unit cube searched by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitPoint(Vec<f64>);

impl UnitPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self, SpaceError> {
        for (index, &value) in coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(SpaceError::OutOfCube { index, value });
            }
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean distance divided by `sqrt(D)`, so the cube diameter maps to 1.
    pub fn normalized_distance(&self, other: &UnitPoint) -> Result<f64, SpaceError> {
        if self.dim() != other.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(squared_distance(&self.0, &other.0).sqrt() / (self.dim() as f64).sqrt())
    }
}

impl TryFrom<Vec<f64>> for UnitPoint {
    type Error = SpaceError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        UnitPoint::new(value)
    }
}

impl From<UnitPoint> for Vec<f64> {
    fn from(value: UnitPoint) -> Self {
        value.0
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Generator input: a condition plus the latent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub condition: Condition,
    pub latent: Vec<f64>,
}

impl GeneratorParams {
    pub fn validate(&self, latent_dim: usize) -> Result<(), SpaceError> {
        if self.latent.len() != latent_dim {
            return Err(SpaceError::DimensionMismatch {
                expected: latent_dim,
                actual: self.latent.len(),
            });
        }
        if let Some(index) = self.latent.iter().position(|v| !v.is_finite()) {
            return Err(SpaceError::InvalidConfig(format!("latent entry {index} is not finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub d_search: usize,
    pub d_z: usize,
    pub projection_seed: u64,
    pub probit_clamp_epsilon: f64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            d_search: 8,
            d_z: 100,
            projection_seed: 0x5eed_f00d,
            probit_clamp_epsilon: 1e-6,
        }
    }
}

impl SpaceConfig {
    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.d_search == 0 {
            return Err(SpaceError::InvalidConfig("d_search must be at least 1".into()));
        }
        if self.d_search > self.d_z {
            return Err(SpaceError::InvalidConfig(format!(
                "d_search ({}) must not exceed d_z ({})",
                self.d_search, self.d_z
            )));
        }
        let eps = self.probit_clamp_epsilon;
        if !(eps > 0.0 && eps < 0.5) {
            return Err(SpaceError::InvalidConfig(format!(
                "probit_clamp_epsilon must lie in (0, 0.5), got {eps}"
            )));
        }
        Ok(())
    }

    /// Total search dimension `D`.
    pub fn dim(&self) -> usize {
        2 + self.d_search
    }
}

/// Standard normal inverse CDF after clamping `u` to `[eps, 1 - eps]`.
pub fn probit(u: f64, eps: f64) -> f64 {
    let u = u.clamp(eps, 1.0 - eps);
    if u == 0.5 {
        return 0.0;
    }
    standard_normal().inverse_cdf(u)
}

pub(crate) fn standard_normal() -> Normal {
    Normal::standard()
}

/// Seeded `d_z x d_search` matrix with orthonormal columns, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentProjection {
    d_z: usize,
    d_search: usize,
    columns: Vec<f64>,
}

impl LatentProjection {
    pub fn new(cfg: &SpaceConfig) -> Result<Self, SpaceError> {
        cfg.validate()?;
        let (d_z, d_search) = (cfg.d_z, cfg.d_search);
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.projection_seed);
        let mut columns: Vec<f64> = Vec::with_capacity(d_z * d_search);
        for j in 0..d_search {
            let mut v: Vec<f64> = (0..d_z).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Modified Gram-Schmidt, applied twice for numerical orthogonality.
            for _ in 0..2 {
                for k in 0..j {
                    let q = &columns[k * d_z..(k + 1) * d_z];
                    let proj: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= proj * qi);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(SpaceError::InvalidConfig("degenerate projection draw".into()));
            }
            columns.extend(v.iter().map(|a| a / norm));
        }
        Ok(Self { d_z, d_search, columns })
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j * self.d_z..(j + 1) * self.d_z]
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn d_search(&self) -> usize {
        self.d_search
    }

    pub fn apply(&self, z_s: &[f64]) -> Result<Vec<f64>, SpaceError> {
        if z_s.len() != self.d_search {
            return Err(SpaceError::DimensionMismatch {
                expected: self.d_search,
                actual: z_s.len(),
            });
        }
        let mut out = vec![0.0; self.d_z];
        for (j, &w) in z_s.iter().enumerate() {
            out.iter_mut().zip(self.column(j)).for_each(|(o, c)| *o += w * c);
        }
        Ok(out)
    }
}

/// Expands a `d_search` latent into `d_z` dimensions with the seeded projection.
pub fn expand_latent(z_s: &[f64], cfg: &SpaceConfig) -> Result<Vec<f64>, SpaceError> {
    LatentProjection::new(cfg)?.apply(z_s)
}

/// Decoder with the projection matrix built once.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    cfg: SpaceConfig,
    projection: LatentProjection,
}

impl SearchSpace {
    pub fn new(cfg: SpaceConfig) -> Result<Self, SpaceError> {
        let projection = LatentProjection::new(&cfg)?;
        Ok(Self { cfg, projection })
    }

    pub fn config(&self) -> &SpaceConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim()
    }

    pub fn decode(&self, x: &UnitPoint) -> Result<GeneratorParams, SpaceError> {
        if x.dim() != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                actual: x.dim(),
            });
        }
        let c = x.coords();
        if let Some((index, &value)) = c.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(SpaceError::OutOfCube { index, value });
        }
        let condition = Condition::new(Race::from_unit(c[0]), Gender::from_unit(c[1]));
        let eps = self.cfg.probit_clamp_epsilon;
        let z_s: Vec<f64> = c[2..].iter().map(|&u| probit(u, eps)).collect();
        let latent = self.projection.apply(&z_s)?;
        Ok(GeneratorParams { condition, latent })
    }
}

/// One-shot decode; builds the projection on every call.
pub fn decode(x: &UnitPoint, cfg: &SpaceConfig) -> Result<GeneratorParams, SpaceError> {
    SearchSpace::new(cfg.clone())?.decode(x)
}
