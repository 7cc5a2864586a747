//! Provider contracts for the text (quiz writing) and vision (quiz taking)
//! models, with HTTP, mock, recording and replay implementations.

mod http;
mod mock;
mod record;

pub use http::{HttpTextProvider, HttpVisionProvider, TEXT_API_KEY_ENV, VISION_API_KEY_ENV};
pub use mock::{image_quality, synthesize_quiz_payload, AnswerKey, FixtureTextProvider, QualityMockVision};
pub use record::{CallLog, RecordingText, RecordingVision, ReplayLog, ReplayText, ReplayVision};

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("provider http error: {0}")]
    Http(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("no recorded response for request {0}")]
    MissingFixture(String),
    #[error("provider i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl TextRequest {
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("request serializes"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextResponse {
    pub text: String,
    #[serde(default)]
    pub token_usage: TokenUsage,
}

pub trait TextCompletionProvider: Send + Sync {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, ProviderError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub image_bytes: Vec<u8>,
    pub media_type: String,
}

#[derive(Serialize)]
struct VisionRequestKey<'a> {
    model_id: &'a str,
    system_text: &'a str,
    user_text: &'a str,
    media_type: &'a str,
    image_sha256: String,
}

impl VisionRequest {
    /// Digest over the request with the image replaced by its SHA-256.
    pub fn digest(&self) -> String {
        let key = VisionRequestKey {
            model_id: &self.model_id,
            system_text: &self.system_text,
            user_text: &self.user_text,
            media_type: &self.media_type,
            image_sha256: sha256_hex(&self.image_bytes),
        };
        sha256_hex(&serde_json::to_vec(&key).expect("request serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionResponse {
    pub text: String,
}

pub trait VisionProvider: Send + Sync {
    fn ask(&self, request: &VisionRequest) -> Result<VisionResponse, ProviderError>;
}

impl<T: TextCompletionProvider + ?Sized> TextCompletionProvider for std::sync::Arc<T> {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, ProviderError> {
        (**self).complete(request)
    }
}

impl<T: VisionProvider + ?Sized> VisionProvider for std::sync::Arc<T> {
    fn ask(&self, request: &VisionRequest) -> Result<VisionResponse, ProviderError> {
        (**self).ask(request)
    }
}

/// Media type sniffed from the leading bytes; defaults to PNG.
pub fn media_type_of(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Jpeg) => "image/jpeg",
        Ok(image::ImageFormat::WebP) => "image/webp",
        _ => "image/png",
    }
}
