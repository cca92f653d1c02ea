//! Exemplar editors: an HTTP client for an external instruction-driven image
//! editor and deterministic mock editors.
//!
//! Wire protocol: `POST {endpoint}/edit` with a JSON body
//!
//! ```json
//! {"image_png_base64": "...", "instruction": "...", "image_guidance": 1.5,
//!  "text_guidance": 3.5, "steps": 100, "seed": 7}
//! ```
//!
//! answered by `{"image_png_base64": "..."}` on success, or a non-success
//! status with `{"error": "..."}`.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_IMAGE_GUIDANCE: f64 = 1.5;
pub const DEFAULT_TEXT_GUIDANCE: f64 = 3.5;
pub const DEFAULT_STEPS: u32 = 100;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);
/// Retries after the first attempt on timeouts and connection failures.
pub const TRANSPORT_RETRIES: usize = 2;
/// Default amplitude of the noisy mock's perturbation.
pub const DEFAULT_NOISE_AMPLITUDE: f64 = 0.12;

pub const SEPIA: [[f32; 3]; 3] = [
    [0.393, 0.769, 0.189],
    [0.349, 0.686, 0.168],
    [0.272, 0.534, 0.131],
];

/// Guidance knobs sent with every request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditParams {
    pub image_guidance: f64,
    pub text_guidance: f64,
    pub steps: u32,
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            image_guidance: DEFAULT_IMAGE_GUIDANCE,
            text_guidance: DEFAULT_TEXT_GUIDANCE,
            steps: DEFAULT_STEPS,
        }
    }
}

impl EditParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.image_guidance) || !positive(self.text_guidance) {
            return Err(Error::InvalidArgument(format!(
                "guidance scales must be positive, got image {} text {}",
                self.image_guidance, self.text_guidance
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument(
                "denoising steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub image: Image,
    pub instruction: String,
    pub image_guidance: f64,
    pub text_guidance: f64,
    pub steps: u32,
    pub seed: u64,
}

impl EditRequest {
    pub fn new(
        image: Image,
        instruction: impl Into<String>,
        params: EditParams,
        seed: u64,
    ) -> Self {
        Self {
            image,
            instruction: instruction.into(),
            image_guidance: params.image_guidance,
            text_guidance: params.text_guidance,
            steps: params.steps,
            seed,
        }
    }

    pub fn params(&self) -> EditParams {
        EditParams {
            image_guidance: self.image_guidance,
            text_guidance: self.text_guidance,
            steps: self.steps,
        }
    }

    /// The JSON body of the wire protocol.
    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "image_png_base64": BASE64.encode(self.image.encode_png()?),
            "instruction": self.instruction,
            "image_guidance": self.image_guidance,
            "text_guidance": self.text_guidance,
            "steps": self.steps,
            "seed": self.seed,
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResponse {
    pub image: Image,
    pub latency: Duration,
}

pub trait Editor: Send + Sync {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse>;
}

/// Sends one request to `{endpoint}/edit`, retrying transport failures.
pub fn edit_remote(endpoint: &str, req: &EditRequest, timeout: Duration) -> Result<EditResponse> {
    req.params().validate()?;
    let url = format!("{}/edit", endpoint.trim_end_matches('/'));
    let body = req.to_json()?.to_string();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let start = Instant::now();
    let attempts = TRANSPORT_RETRIES + 1;
    let mut last_timeout = None;
    let mut last_other = None;
    for _ in 0..attempts {
        let sent = agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(body.as_str());
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) if is_timeout(&e) => {
                last_timeout = Some(e.to_string());
                last_other = None;
                continue;
            }
            Err(e) if is_transient(&e) => {
                last_other = Some(e.to_string());
                last_timeout = None;
                continue;
            }
            Err(e) => return Err(Error::EditorTransport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_string()
        {
            Ok(t) => t,
            Err(e) if is_timeout(&e) => {
                last_timeout = Some(e.to_string());
                last_other = None;
                continue;
            }
            Err(e) => return Err(Error::EditorTransport(e.to_string())),
        };
        if !(200..300).contains(&status) {
            return Err(Error::EditorStatus {
                status,
                message: server_message(&text),
            });
        }
        let image = decode_response(&text)?;
        check_resolution(req, &image)?;
        return Ok(EditResponse {
            image,
            latency: start.elapsed(),
        });
    }
    match (last_timeout, last_other) {
        (Some(message), _) => Err(Error::EditorTimeout { attempts, message }),
        (_, message) => Err(Error::EditorTransport(format!(
            "{} after {attempts} attempts",
            message.unwrap_or_default()
        ))),
    }
}

fn is_timeout(e: &ureq::Error) -> bool {
    match e {
        ureq::Error::Timeout(_) => true,
        ureq::Error::Io(io) => matches!(
            io.kind(),
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
        ),
        _ => false,
    }
}

fn is_transient(e: &ureq::Error) -> bool {
    matches!(
        e,
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound | ureq::Error::Io(_)
    )
}

fn server_message(text: &str) -> String {
    serde_json::from_str::<serde_json::Value>(text)
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_owned))
        .unwrap_or_else(|| text.chars().take(500).collect())
}

fn decode_response(text: &str) -> Result<Image> {
    let v: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::EditorTransport(format!("response is not JSON: {e}")))?;
    let b64 = v
        .get("image_png_base64")
        .and_then(|s| s.as_str())
        .ok_or_else(|| Error::EditorTransport("response lacks `image_png_base64`".into()))?;
    let bytes = BASE64
        .decode(b64)
        .map_err(|e| Error::EditorTransport(format!("bad base64 image: {e}")))?;
    Ok(Image::decode_png(&bytes)?.to_rgb())
}

fn check_resolution(req: &EditRequest, image: &Image) -> Result<()> {
    if image.dims() != req.image.dims() {
        return Err(Error::SizeMismatch(format!(
            "editor returned {}x{} for a {}x{} request",
            image.width(),
            image.height(),
            req.image.width(),
            req.image.height()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MockKind {
    Identity,
    Sepia,
    /// Quantize every channel to `k` evenly spaced levels.
    Posterize(u32),
}

impl FromStr for MockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => return Ok(MockKind::Identity),
            "sepia" => return Ok(MockKind::Sepia),
            _ => {}
        }
        let levels = s
            .strip_prefix("posterize")
            .map(|r| r.trim_start_matches([':', '(']).trim_end_matches(')'));
        match levels.map(str::parse::<u32>) {
            Some(Ok(k)) if k >= 2 => Ok(MockKind::Posterize(k)),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mock editor kind `{s}`"
            ))),
        }
    }
}

impl fmt::Display for MockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MockKind::Identity => write!(f, "identity"),
            MockKind::Sepia => write!(f, "sepia"),
            MockKind::Posterize(k) => write!(f, "posterize:{k}"),
        }
    }
}

/// Applies a mock edit; the instruction text is ignored.
pub fn edit_mock(kind: MockKind, req: &EditRequest) -> Result<EditResponse> {
    let start = Instant::now();
    let rgb = req.image.to_rgb();
    let image = match kind {
        MockKind::Identity => rgb,
        MockKind::Sepia => rgb.map_pixels(3, |s, d| {
            for (o, row) in d.iter_mut().zip(&SEPIA) {
                *o = (row[0] * s[0] + row[1] * s[1] + row[2] * s[2]).clamp(0.0, 1.0);
            }
        }),
        MockKind::Posterize(k) => {
            if k < 2 {
                return Err(Error::InvalidArgument(
                    "posterize needs at least 2 levels".into(),
                ));
            }
            let n = (k - 1) as f32;
            rgb.map_pixels(3, |s, d| {
                for (o, v) in d.iter_mut().zip(s) {
                    *o = (v.clamp(0.0, 1.0) * n).round() / n;
                }
            })
        }
    };
    Ok(EditResponse {
        image,
        latency: start.elapsed(),
    })
}

/// FNV-1a over the 8-bit image samples.
fn image_hash(image: &Image) -> u64 {
    image
        .to_bytes()
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
}

/// Perturbs `image` with a per-image tint, smooth waves and pixel noise, all
/// drawn from `seed` and the image content.
pub fn inject_noise(image: &Image, seed: u64, amplitude: f64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ image_hash(image));
    let a = amplitude as f32;
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-a..=a));
    let waves: Vec<[f32; 5]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(-a..=a),
                rng.random_range(0.0..3.0f32).floor(),
            ]
        })
        .collect();
    let (w, h) = image.dims();
    let src = image.to_rgb();
    Image::from_fn(w, h, 3, |x, y, px| {
        let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
        for c in 0..3 {
            let mut d = tint[c];
            for wv in &waves {
                if wv[4] as usize == c {
                    d += wv[3] * (std::f32::consts::TAU * (wv[0] * u + wv[1] * v) + wv[2]).sin();
                }
            }
            d += rng.random_range(-0.5 * a..=0.5 * a);
            px[c] = (src.get(x, y, c) + d).clamp(0.0, 1.0);
        }
    })
}

/// Where edits come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EditorSpec {
    Remote {
        endpoint: String,
        timeout: Duration,
    },
    /// A mock, optionally followed by [`inject_noise`] with amplitude `noise`.
    Mock {
        kind: MockKind,
        noise: Option<f64>,
    },
}

impl EditorSpec {
    pub fn build(&self) -> Box<dyn Editor> {
        match self {
            EditorSpec::Remote { endpoint, timeout } => Box::new(RemoteEditor {
                endpoint: endpoint.clone(),
                timeout: *timeout,
            }),
            EditorSpec::Mock { kind, noise } => Box::new(MockEditor {
                kind: *kind,
                noise: *noise,
            }),
        }
    }
}

/// `mock:KIND[+noise[=AMP]]` or an `http(s)://` endpoint.
impl FromStr for EditorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(EditorSpec::Remote {
                endpoint: s.to_owned(),
                timeout: DEFAULT_TIMEOUT,
            });
        }
        let Some(rest) = s.strip_prefix("mock:") else {
            return Err(Error::Config(format!(
                "editor must be `mock:KIND` or an http(s) endpoint, got `{s}`"
            )));
        };
        let (kind, noise) = match rest.split_once('+') {
            None => (rest, None),
            Some((kind, "noise")) => (kind, Some(DEFAULT_NOISE_AMPLITUDE)),
            Some((kind, n)) => {
                let amp = n
                    .strip_prefix("noise=")
                    .and_then(|a| a.parse::<f64>().ok())
                    .filter(|a| a.is_finite() && *a >= 0.0)
                    .ok_or_else(|| Error::Config(format!("bad noise suffix in `{s}`")))?;
                (kind, Some(amp))
            }
        };
        Ok(EditorSpec::Mock {
            kind: kind.parse()?,
            noise,
        })
    }
}

impl fmt::Display for EditorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditorSpec::Remote { endpoint, .. } => write!(f, "{endpoint}"),
            EditorSpec::Mock { kind, noise: None } => write!(f, "mock:{kind}"),
            EditorSpec::Mock {
                kind,
                noise: Some(a),
            } => write!(f, "mock:{kind}+noise={a}"),
        }
    }
}

impl Serialize for EditorSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EditorSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug)]
pub struct RemoteEditor {
    pub endpoint: String,
    pub timeout: Duration,
}

impl Editor for RemoteEditor {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse> {
        edit_remote(&self.endpoint, req, self.timeout)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MockEditor {
    pub kind: MockKind,
    pub noise: Option<f64>,
}

impl Editor for MockEditor {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse> {
        let mut resp = edit_mock(self.kind, req)?;
        if let Some(a) = self.noise {
            resp.image = inject_noise(&resp.image, req.seed, a);
        }
        Ok(resp)
    }
}

/// Wraps an editor and counts the calls it receives.
pub struct CountingEditor<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E: Editor> CountingEditor<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<E: Editor> Editor for CountingEditor<E> {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.edit(req)
    }
}

impl<E: Editor + ?Sized> Editor for Box<E> {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse> {
        (**self).edit(req)
    }
}

impl<E: Editor + ?Sized> Editor for &E {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse> {
        (**self).edit(req)
    }
}
