//! Classifiers under test and the mapping from their outcomes to losses.

use std::io::Read;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::generators::{encode_png, GeneratedImage};
use crate::search_space::{Condition, Gender, GeneratorParams, Race, UnitPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("classifier returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not parse classifier response: {0}")]
    Parse(String),
    #[error("could not encode probe image: {0}")]
    Encode(String),
    #[error("invalid target configuration: {0}")]
    InvalidConfig(String),
}

/// What the classifier said about one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub face_detected: bool,
    pub predicted_gender: Option<Gender>,
    #[serde(skip)]
    pub raw_payload: String,
}

impl ClassificationOutcome {
    pub fn new(face_detected: bool, predicted_gender: Option<Gender>, raw_payload: String) -> Self {
        debug_assert!(predicted_gender.is_none() || face_detected);
        Self {
            face_detected,
            predicted_gender: if face_detected { predicted_gender } else { None },
            raw_payload,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    #[serde(alias = "face")]
    FaceDetection,
    #[serde(alias = "gender")]
    GenderDetection,
}

impl Task {
    pub fn label(self) -> &'static str {
        match self {
            Task::FaceDetection => "face_detection",
            Task::GenderDetection => "gender_detection",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "face" | "face_detection" => Ok(Task::FaceDetection),
            "gender" | "gender_detection" => Ok(Task::GenderDetection),
            other => Err(format!("unknown task `{other}` (expected face or gender)")),
        }
    }
}

/// Loss of one classification for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskLoss {
    Correct,
    Failure,
    /// Gender task with no detected face.
    Indeterminate,
}

impl TaskLoss {
    pub fn is_failure(self) -> bool {
        self == TaskLoss::Failure
    }
}

pub fn outcome_to_loss(outcome: &ClassificationOutcome, theta: &GeneratorParams, task: Task) -> TaskLoss {
    match task {
        Task::FaceDetection if outcome.face_detected => TaskLoss::Correct,
        Task::FaceDetection => TaskLoss::Failure,
        Task::GenderDetection if !outcome.face_detected => TaskLoss::Indeterminate,
        Task::GenderDetection => {
            if outcome.predicted_gender == Some(theta.condition.gender) {
                TaskLoss::Correct
            } else {
                TaskLoss::Failure
            }
        }
    }
}

/// Input handed to a classifier: the search point, its decoding and the image.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub x: &'a UnitPoint,
    pub theta: &'a GeneratorParams,
    pub image: &'a GeneratedImage,
}

pub trait Classifier {
    fn classify(&mut self, probe: &Probe<'_>) -> Result<ClassificationOutcome, TargetError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRates {
    pub face: f64,
    pub gender: f64,
}

/// Synthetic classifier with configured per-cell failure rates and one
/// deterministic region where faces are always missed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedBiasSpec {
    /// Indexed by `Condition::index`.
    pub cell_rates: [CellRates; 8],
    pub hotspot_center: UnitPoint,
    pub hotspot_radius: f64,
    pub hash_seed: u64,
}

/// Per-race face-detection failure rates used by the default planted target.
pub const DEFAULT_FACE_RATES: [(Race, f64); 4] = [
    (Race::Black, 0.169),
    (Race::SouthAsian, 0.0763),
    (Race::NortheastAsian, 0.0396),
    (Race::White, 0.038),
];

/// Per-race gender-classification failure rates used by the default planted target.
pub const DEFAULT_GENDER_RATES: [(Race, f64); 4] = [
    (Race::Black, 0.09),
    (Race::SouthAsian, 0.0213),
    (Race::NortheastAsian, 0.20),
    (Race::White, 0.0187),
];

pub const DEFAULT_HOTSPOT_RADIUS: f64 = 0.15;
pub const DEFAULT_HASH_SEED: u64 = 0x0b1a_5ed0;

impl PlantedBiasSpec {
    /// Default target for a `dim`-dimensional search space: per-race rates
    /// shared by both genders, hotspot centred inside the Black/Man cell.
    pub fn default_for_dim(dim: usize) -> Self {
        let mut cell_rates = [CellRates { face: 0.0, gender: 0.0 }; 8];
        for c in Condition::all() {
            let face = DEFAULT_FACE_RATES[c.race.index()].1;
            let gender = DEFAULT_GENDER_RATES[c.race.index()].1;
            cell_rates[c.index()] = CellRates { face, gender };
        }
        let mut center = vec![0.5; dim];
        center[0] = 0.125;
        if dim > 1 {
            center[1] = 0.25;
        }
        Self {
            cell_rates,
            hotspot_center: UnitPoint::new(center).expect("constant center lies in the cube"),
            hotspot_radius: DEFAULT_HOTSPOT_RADIUS,
            hash_seed: DEFAULT_HASH_SEED,
        }
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        for (i, r) in self.cell_rates.iter().enumerate() {
            for p in [r.face, r.gender] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(TargetError::InvalidConfig(format!("cell {i} rate {p} outside [0, 1]")));
                }
            }
        }
        if !(self.hotspot_radius >= 0.0 && self.hotspot_radius.is_finite()) {
            return Err(TargetError::InvalidConfig("hotspot_radius must be >= 0".into()));
        }
        Ok(())
    }

    pub fn rates(&self, c: Condition) -> CellRates {
        self.cell_rates[c.index()]
    }

    pub fn in_hotspot(&self, x: &UnitPoint) -> bool {
        match x.normalized_distance(&self.hotspot_center) {
            Ok(d) => d < self.hotspot_radius,
            Err(_) => false,
        }
    }
}

const FACE_STREAM: u8 = 0;
const GENDER_STREAM: u8 = 1;

/// Uniform value in `[0, 1)` from a SHA-256 hash of the point's coordinates.
pub fn point_hash_uniform(x: &UnitPoint, seed: u64, stream: u8) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([stream]);
    for c in x.coords() {
        h.update(c.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    // 53 high bits give an exactly representable value strictly below 1.
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn planted_classify(x: &UnitPoint, theta: &GeneratorParams, spec: &PlantedBiasSpec) -> ClassificationOutcome {
    let rates = spec.rates(theta.condition);
    let u_face = point_hash_uniform(x, spec.hash_seed, FACE_STREAM);
    let face_detected = !(u_face < rates.face || spec.in_hotspot(x));
    let predicted_gender = face_detected.then(|| {
        let u_gender = point_hash_uniform(x, spec.hash_seed, GENDER_STREAM);
        if u_gender < rates.gender {
            theta.condition.gender.flipped()
        } else {
            theta.condition.gender
        }
    });
    let raw_payload = serde_json::json!({
        "face_detected": face_detected,
        "predicted_gender": predicted_gender.map(|g| g.label()),
    })
    .to_string();
    ClassificationOutcome {
        face_detected,
        predicted_gender,
        raw_payload,
    }
}

#[derive(Debug, Clone)]
pub struct PlantedClassifier {
    spec: PlantedBiasSpec,
}

impl PlantedClassifier {
    pub fn new(spec: PlantedBiasSpec) -> Result<Self, TargetError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &PlantedBiasSpec {
        &self.spec
    }
}

impl Classifier for PlantedClassifier {
    fn classify(&mut self, probe: &Probe<'_>) -> Result<ClassificationOutcome, TargetError> {
        Ok(planted_classify(probe.x, probe.theta, &self.spec))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiEndpoint {
    pub url: String,
    /// Value sent in the `Authorization` header.
    pub auth_header: Option<String>,
    pub timeout: Duration,
    pub retries: usize,
    /// Wait before retry `k` is `backoff[min(k, len - 1)]`.
    pub backoff: Vec<Duration>,
    pub max_requests_per_second: f64,
}

impl ApiEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            auth_header: None,
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: [1, 2, 4].into_iter().map(Duration::from_secs).collect(),
            max_requests_per_second: 5.0,
        }
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        if !(self.max_requests_per_second > 0.0 && self.max_requests_per_second.is_finite()) {
            return Err(TargetError::InvalidConfig("max_requests_per_second must be > 0".into()));
        }
        if self.url.is_empty() {
            return Err(TargetError::InvalidConfig("target url is empty".into()));
        }
        Ok(())
    }

    fn backoff_for(&self, retry: usize) -> Duration {
        match self.backoff.len() {
            0 => Duration::ZERO,
            n => self.backoff[retry.min(n - 1)],
        }
    }
}

/// Spaces request starts at least `1 / rps` apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    last: Option<Instant>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            last: None,
        }
    }

    pub fn acquire(&mut self) {
        if let Some(last) = self.last {
            let ready = last + self.interval;
            let now = Instant::now();
            if ready > now {
                thread::sleep(ready - now);
            }
        }
        self.last = Some(Instant::now());
    }
}

#[derive(Debug, Deserialize)]
struct FaceEntry {
    #[serde(rename = "box")]
    _bbox: [f64; 4],
    gender: Option<String>,
    confidence: f64,
}

#[derive(Debug, Deserialize)]
struct ClassifierResponse {
    faces: Vec<FaceEntry>,
}

/// Parses the canonical response schema; the most confident face decides the gender.
pub fn parse_classifier_response(body: &str) -> Result<ClassificationOutcome, TargetError> {
    let parsed: ClassifierResponse = serde_json::from_str(body).map_err(|e| TargetError::Parse(e.to_string()))?;
    let mut top: Option<&FaceEntry> = None;
    for face in &parsed.faces {
        if !face.confidence.is_finite() {
            return Err(TargetError::Parse("non-finite confidence".into()));
        }
        if top.is_none_or(|t| face.confidence > t.confidence) {
            top = Some(face);
        }
    }
    let predicted_gender = match top.and_then(|f| f.gender.as_deref()) {
        None => None,
        Some("male") => Some(Gender::Man),
        Some("female") => Some(Gender::Woman),
        Some(other) => return Err(TargetError::Parse(format!("unknown gender label `{other}`"))),
    };
    Ok(ClassificationOutcome {
        face_detected: top.is_some(),
        predicted_gender,
        raw_payload: body.to_string(),
    })
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Client for a face-analysis HTTP API speaking the canonical schema.
#[derive(Debug)]
pub struct HttpClassifier {
    endpoint: ApiEndpoint,
    agent: ureq::Agent,
    limiter: RateLimiter,
}

impl HttpClassifier {
    pub fn new(endpoint: ApiEndpoint) -> Result<Self, TargetError> {
        endpoint.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = RateLimiter::new(endpoint.max_requests_per_second);
        Ok(Self {
            endpoint,
            agent,
            limiter,
        })
    }

    pub fn endpoint(&self) -> &ApiEndpoint {
        &self.endpoint
    }

    fn send_once(&mut self, body: &[u8]) -> Result<(u16, String), String> {
        self.limiter.acquire();
        let mut req = self.agent.post(&self.endpoint.url).header("Content-Type", "image/png");
        if let Some(auth) = &self.endpoint.auth_header {
            req = req.header("Authorization", auth);
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let mut text = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut text)
            .map_err(|e| e.to_string())?;
        Ok((status, text))
    }

    /// POSTs the PNG-encoded image and maps the response.
    pub fn classify_image(&mut self, image: &GeneratedImage) -> Result<ClassificationOutcome, TargetError> {
        let png = encode_png(image).map_err(|e| TargetError::Encode(e.to_string()))?;
        let attempts = self.endpoint.retries + 1;
        let mut last_failure = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.endpoint.backoff_for(attempt - 1));
            }
            match self.send_once(&png) {
                Ok((200..=299, body)) => return parse_classifier_response(&body),
                Ok((status, body)) if retryable(status) => {
                    log::warn!("classifier returned {status}, attempt {}/{attempts}", attempt + 1);
                    last_failure = Some(TargetError::Status { status, body });
                }
                Ok((status, body)) => return Err(TargetError::Status { status, body }),
                Err(message) => {
                    log::warn!("classifier transport error: {message}");
                    last_failure = Some(TargetError::Transport {
                        attempts: attempt + 1,
                        message,
                    });
                }
            }
        }
        Err(last_failure.expect("at least one attempt"))
    }
}

impl Classifier for HttpClassifier {
    fn classify(&mut self, probe: &Probe<'_>) -> Result<ClassificationOutcome, TargetError> {
        self.classify_image(probe.image)
    }
}

/// `http_classify` as a free function over a fresh client.
pub fn http_classify(endpoint: &ApiEndpoint, image: &GeneratedImage) -> Result<ClassificationOutcome, TargetError> {
    HttpClassifier::new(endpoint.clone())?.classify_image(image)
}
