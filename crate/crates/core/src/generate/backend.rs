//! Text-to-image backends: an HTTP client for an inference server and a
//! deterministic offline stub.

use std::fs;
use std::io::Cursor;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::rng::{derive_seed, SplitMix64};
use crate::train::StubLoRA;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rejected request: {0}")]
    BadRequest(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

/// Request body of the image backend contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub positive: String,
    pub negative: String,
    pub seed: u64,
    pub steps: u32,
    pub cfg: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResponse {
    pub image_bytes: Vec<u8>,
    pub metadata: serde_json::Value,
}

/// Response body of the image backend contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageResponseBody {
    pub image_base64: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub trait ImageBackend: Send + Sync {
    fn model_tag(&self) -> &str;
    fn generate(&self, request: &ImageRequest) -> Result<ImageResponse, BackendError>;
}

/// POSTs the request as JSON; expects `{"image_base64": .., "metadata": {..}}`.
pub struct HttpImageBackend {
    endpoint: String,
    model_tag: String,
    agent: ureq::Agent,
    in_flight: Mutex<()>,
}

impl HttpImageBackend {
    pub fn new(endpoint: impl Into<String>, model_tag: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(600)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model_tag: model_tag.into(),
            agent,
            in_flight: Mutex::new(()),
        }
    }
}

impl ImageBackend for HttpImageBackend {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn generate(&self, request: &ImageRequest) -> Result<ImageResponse, BackendError> {
        // one request at a time per backend instance
        let _serial = self.in_flight.lock().expect("backend lock");
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::BadRequest(body));
        }
        if status >= 300 {
            return Err(BackendError::Unavailable(format!("http status {status}")));
        }
        let body: ImageResponseBody = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let image_bytes = base64::engine::general_purpose::STANDARD
            .decode(body.image_base64.as_bytes())
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        Ok(ImageResponse {
            image_bytes,
            metadata: body.metadata,
        })
    }
}

/// Offline backend rendering seed-keyed noise around a target intensity.
///
/// The intensity is `base_quality` without a LoRA, and moves toward the
/// stub LoRA's recorded quality by `lora_weight` when `lora_tag` names a
/// [`StubLoRA`] file. Identical requests give identical bytes.
pub struct StubImageBackend {
    model_tag: String,
    base_quality: f64,
}

impl StubImageBackend {
    pub fn new(model_tag: impl Into<String>, base_quality: f64) -> Self {
        Self {
            model_tag: model_tag.into(),
            base_quality: base_quality.clamp(0.0, 1.0),
        }
    }
}

/// PNG of `width`x`height` noise whose mean channel intensity is about `quality`.
pub fn render_noise_png(width: u32, height: u32, quality: f64, seed: u64) -> Vec<u8> {
    let center = quality.clamp(0.0, 1.0) * 255.0;
    let spread = center.min(255.0 - center).min(48.0);
    let mut rng = SplitMix64::new(seed);
    let img = image::RgbImage::from_fn(width.max(1), height.max(1), |_, _| {
        let mut px = [0u8; 3];
        for c in &mut px {
            let v = center + (rng.next_f64() * 2.0 - 1.0) * spread;
            *c = v.round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encoding to memory");
    out.into_inner()
}

impl ImageBackend for StubImageBackend {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn generate(&self, request: &ImageRequest) -> Result<ImageResponse, BackendError> {
        if request.positive.trim().is_empty() {
            return Err(BackendError::BadRequest("missing positive prompt".into()));
        }
        let mut quality = self.base_quality;
        // keyed on the LoRA file's content, not its location
        let mut keyed = request.clone();
        if let Some(tag) = &request.lora_tag {
            let bytes = fs::read(tag).map_err(|e| BackendError::BadRequest(format!("lora {tag}: {e}")))?;
            let lora: StubLoRA =
                serde_json::from_slice(&bytes).map_err(|e| BackendError::BadRequest(format!("lora {tag}: {e}")))?;
            let w = request.lora_weight.unwrap_or(1.0);
            quality += w * (lora.quality - self.base_quality);
            keyed.lora_tag = Some(sha256_hex(&bytes));
        }
        let key = serde_json::to_string(&keyed).expect("request serializes");
        let seed = derive_seed(&[&self.model_tag, &key]);
        Ok(ImageResponse {
            image_bytes: render_noise_png(request.width, request.height, quality, seed),
            metadata: serde_json::json!({
                "stub": true,
                "quality": quality,
                "lora_tag": request.lora_tag,
            }),
        })
    }
}
