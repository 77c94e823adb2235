//! Image generators: a procedural stand-in and a client for the GAN service.

use std::io::{Cursor, Read};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::search_space::{GeneratorParams, Race};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("invalid generator input: {0}")]
    InvalidInput(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("generator service returned HTTP {status}: {message}")]
    Service { status: u16, message: String },
    #[error("generator protocol error: {0}")]
    Protocol(String),
    #[error("image codec error: {0}")]
    Codec(String),
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GeneratedImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, GeneratorError> {
        let expected = width as usize * height as usize * 3;
        if width == 0 || height == 0 || pixels.len() != expected {
            return Err(GeneratorError::InvalidInput(format!(
                "{width}x{height} image needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Mean of each channel over all pixels, in `[0, 255]`.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        let n = (self.width as u64 * self.height as u64) as f64;
        sums.map(|s| s as f64 / n)
    }
}

pub fn encode_png(image: &GeneratedImage) -> Result<Vec<u8>, GeneratorError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width, image.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| GeneratorError::Codec(e.to_string()))?;
        writer
            .write_image_data(&image.pixels)
            .map_err(|e| GeneratorError::Codec(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes any 8-bit-normalizable PNG into RGB.
pub fn decode_png(bytes: &[u8]) -> Result<GeneratedImage, GeneratorError> {
    let codec = |e: png::DecodingError| GeneratorError::Codec(e.to_string());
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(codec)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| GeneratorError::Codec("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(codec)?;
    buf.truncate(info.buffer_size());
    let pixels = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(GeneratorError::Codec(format!("unsupported color type {other:?}"))),
    };
    GeneratedImage::new(info.width, info.height, pixels)
}

pub trait Generator {
    fn latent_dim(&self) -> usize;
    fn generate(&mut self, theta: &GeneratorParams) -> Result<GeneratedImage, GeneratorError>;
}

const BACKGROUNDS: [[u8; 3]; 4] = [[40, 90, 200], [60, 170, 90], [200, 170, 60], [180, 70, 160]];
const SKIN: [[u8; 3]; 4] = [[92, 60, 44], [150, 105, 76], [224, 188, 158], [238, 204, 184]];

fn latent_seed(latent: &[f64]) -> u64 {
    let mut h = Sha256::new();
    for v in latent {
        h.update(v.to_bits().to_le_bytes());
    }
    let d = h.finalize();
    let mut w = [0u8; 8];
    w.copy_from_slice(&d[..8]);
    u64::from_le_bytes(w)
}

/// Procedural face stand-in: background colour from the race bin, a centred
/// disc (skin tone by race, radius by gender) and latent-seeded texture.
pub fn synthetic_generate(theta: &GeneratorParams, size: u32) -> Result<GeneratedImage, GeneratorError> {
    if size < 8 {
        return Err(GeneratorError::InvalidInput(format!("size must be >= 8, got {size}")));
    }
    let race = theta.condition.race.index();
    let radius_frac = match theta.condition.gender {
        crate::search_space::Gender::Man => 0.26,
        crate::search_space::Gender::Woman => 0.36,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(latent_seed(&theta.latent));
    let s = size as f64;
    let (cx, cy) = (s / 2.0, s / 2.0);
    let r2 = (radius_frac * s).powi(2);
    let mut pixels = Vec::with_capacity((size * size * 3) as usize);
    for row in 0..size {
        for col in 0..size {
            let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
            let base = if dx * dx + dy * dy <= r2 {
                SKIN[race]
            } else {
                BACKGROUNDS[race]
            };
            let noise: i16 = rng.random_range(-10..=10);
            pixels.extend(base.iter().map(|&b| (b as i16 + noise).clamp(0, 255) as u8));
        }
    }
    GeneratedImage::new(size, size, pixels)
}

#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    pub size: u32,
    pub latent_dim: usize,
}

impl SyntheticGenerator {
    pub fn new(size: u32, latent_dim: usize) -> Self {
        Self { size, latent_dim }
    }
}

impl Generator for SyntheticGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn generate(&mut self, theta: &GeneratorParams) -> Result<GeneratedImage, GeneratorError> {
        theta
            .validate(self.latent_dim)
            .map_err(|e| GeneratorError::InvalidInput(e.to_string()))?;
        synthetic_generate(theta, self.size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorEndpoint {
    pub base_url: String,
    pub timeout: Duration,
    pub retries: usize,
    pub backoff: Vec<Duration>,
}

impl GeneratorEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: [1, 2, 4].into_iter().map(Duration::from_secs).collect(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub resolution: u32,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub race: String,
    pub gender: String,
    pub latent: Vec<f64>,
}

impl GenerateRequest {
    pub fn from_params(theta: &GeneratorParams) -> Self {
        Self {
            race: theta.condition.race.label().to_string(),
            gender: theta.condition.gender.label().to_string(),
            latent: theta.latent.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_png_base64: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Client for the generator wire protocol (`GET /health`, `POST /generate`).
#[derive(Debug)]
pub struct RemoteGenerator {
    endpoint: GeneratorEndpoint,
    agent: ureq::Agent,
    health: HealthResponse,
}

impl RemoteGenerator {
    /// Connects and runs the health check.
    pub fn connect(endpoint: GeneratorEndpoint) -> Result<Self, GeneratorError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut client = Self {
            endpoint,
            agent,
            health: HealthResponse {
                status: String::new(),
                resolution: 0,
                latent_dim: 0,
            },
        };
        client.health = client.check_health()?;
        Ok(client)
    }

    pub fn health(&self) -> &HealthResponse {
        &self.health
    }

    fn with_retries(
        &self,
        mut call: impl FnMut() -> Result<(u16, String), String>,
    ) -> Result<(u16, String), GeneratorError> {
        let attempts = self.endpoint.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 && !self.endpoint.backoff.is_empty() {
                let k = (attempt - 1).min(self.endpoint.backoff.len() - 1);
                thread::sleep(self.endpoint.backoff[k]);
            }
            match call() {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("generator transport error: {e}");
                    last = e;
                }
            }
        }
        Err(GeneratorError::Transport {
            attempts,
            message: last,
        })
    }

    pub fn check_health(&self) -> Result<HealthResponse, GeneratorError> {
        let url = self.endpoint.url("/health");
        let (status, body) = self.with_retries(|| {
            let mut resp = self.agent.get(&url).call().map_err(|e| e.to_string())?;
            read_body(&mut resp).map(|b| (resp.status().as_u16(), b))
        })?;
        if status != 200 {
            return Err(service_error(status, &body));
        }
        let health: HealthResponse =
            serde_json::from_str(&body).map_err(|e| GeneratorError::Protocol(format!("health: {e}")))?;
        if health.status != "ok" {
            return Err(GeneratorError::Protocol(format!("service status `{}`", health.status)));
        }
        Ok(health)
    }

    /// One `/generate` round trip, validated against the advertised resolution.
    pub fn remote_generate(&self, theta: &GeneratorParams) -> Result<GeneratedImage, GeneratorError> {
        theta
            .validate(self.health.latent_dim)
            .map_err(|e| GeneratorError::InvalidInput(e.to_string()))?;
        let body = serde_json::to_string(&GenerateRequest::from_params(theta))
            .map_err(|e| GeneratorError::Protocol(e.to_string()))?;
        let url = self.endpoint.url("/generate");
        let (status, text) = self.with_retries(|| {
            let mut resp = self
                .agent
                .post(&url)
                .header("Content-Type", "application/json")
                .send(body.as_bytes())
                .map_err(|e| e.to_string())?;
            read_body(&mut resp).map(|b| (resp.status().as_u16(), b))
        })?;
        if status != 200 {
            return Err(service_error(status, &text));
        }
        let parsed: GenerateResponse =
            serde_json::from_str(&text).map_err(|e| GeneratorError::Protocol(format!("generate: {e}")))?;
        let bytes = BASE64
            .decode(parsed.image_png_base64.as_bytes())
            .map_err(|e| GeneratorError::Protocol(format!("base64: {e}")))?;
        let image = decode_png(&bytes)?;
        let res = self.health.resolution;
        if image.width != parsed.width || image.height != parsed.height {
            return Err(GeneratorError::Protocol(format!(
                "declared {}x{} but PNG is {}x{}",
                parsed.width, parsed.height, image.width, image.height
            )));
        }
        if image.width != res || image.height != res {
            return Err(GeneratorError::Protocol(format!(
                "service resolution is {res} but image is {}x{}",
                image.width, image.height
            )));
        }
        Ok(image)
    }
}

fn read_body(resp: &mut ureq::http::Response<ureq::Body>) -> Result<String, String> {
    let mut text = String::new();
    resp.body_mut()
        .as_reader()
        .read_to_string(&mut text)
        .map_err(|e| e.to_string())?;
    Ok(text)
}

fn service_error(status: u16, body: &str) -> GeneratorError {
    let message = serde_json::from_str::<ErrorResponse>(body)
        .map(|e| e.error)
        .unwrap_or_else(|_| body.to_string());
    GeneratorError::Service { status, message }
}

impl Generator for RemoteGenerator {
    fn latent_dim(&self) -> usize {
        self.health.latent_dim
    }

    fn generate(&mut self, theta: &GeneratorParams) -> Result<GeneratedImage, GeneratorError> {
        self.remote_generate(theta)
    }
}

/// Background colour of a race bin; exposed for tests and mean-face checks.
pub fn background_color(race: Race) -> [u8; 3] {
    BACKGROUNDS[race.index()]
}
