use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{
    ProviderError, TextCompletionProvider, TextRequest, TextResponse, TokenUsage, VisionProvider,
    VisionRequest, VisionResponse,
};

pub const TEXT_API_KEY_ENV: &str = "TEXT_API_KEY";
pub const VISION_API_KEY_ENV: &str = "VISION_API_KEY";

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .build()
        .into()
}

fn post_chat(agent: &ureq::Agent, endpoint: &str, api_key: Option<&str>, body: &Value) -> Result<Value, ProviderError> {
    let mut req = agent.post(endpoint).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(|e| ProviderError::Http(e.to_string()))?;
    resp.body_mut()
        .read_json::<Value>()
        .map_err(|e| ProviderError::Malformed(e.to_string()))
}

fn message_text(body: &Value) -> Result<String, ProviderError> {
    body.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))
}

/// Chat-completions client for quiz generation.
pub struct HttpTextProvider {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTextProvider {
    /// The key is read from `TEXT_API_KEY` when not given.
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.or_else(|| std::env::var(TEXT_API_KEY_ENV).ok()),
            agent: agent(),
        }
    }
}

pub(crate) fn text_request_body(request: &TextRequest) -> Value {
    json!({
        "model": request.model_id,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": request.user_text},
        ],
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
    })
}

pub(crate) fn vision_request_body(request: &VisionRequest) -> Value {
    let data = base64::engine::general_purpose::STANDARD.encode(&request.image_bytes);
    json!({
        "model": request.model_id,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": [
                {"type": "text", "text": request.user_text},
                {"type": "image_url", "image_url": {"url": format!("data:{};base64,{data}", request.media_type)}},
            ]},
        ],
        "temperature": 0,
    })
}

impl TextCompletionProvider for HttpTextProvider {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, ProviderError> {
        let body = post_chat(&self.agent, &self.endpoint, self.api_key.as_deref(), &text_request_body(request))?;
        let usage = TokenUsage {
            prompt_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: body
                .pointer("/usage/completion_tokens")
                .and_then(Value::as_u64)
                .unwrap_or(0),
        };
        Ok(TextResponse {
            text: message_text(&body)?,
            token_usage: usage,
        })
    }
}

/// Chat-completions client that attaches the image as a base64 data URL.
pub struct HttpVisionProvider {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpVisionProvider {
    /// The key is read from `VISION_API_KEY` when not given.
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.or_else(|| std::env::var(VISION_API_KEY_ENV).ok()),
            agent: agent(),
        }
    }
}

impl VisionProvider for HttpVisionProvider {
    fn ask(&self, request: &VisionRequest) -> Result<VisionResponse, ProviderError> {
        let body = post_chat(&self.agent, &self.endpoint, self.api_key.as_deref(), &vision_request_body(request))?;
        Ok(VisionResponse {
            text: message_text(&body)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vision_body_carries_data_url() {
        let req = VisionRequest {
            model_id: "m".into(),
            system_text: "s".into(),
            user_text: "u".into(),
            image_bytes: vec![1, 2, 3],
            media_type: "image/png".into(),
        };
        let body = vision_request_body(&req);
        assert_eq!(
            body.pointer("/messages/1/content/1/image_url/url").unwrap(),
            "data:image/png;base64,AQID"
        );
    }

    #[test]
    fn text_body_shape() {
        let req = TextRequest {
            model_id: "gpt".into(),
            system_text: "sys".into(),
            user_text: "usr".into(),
            max_tokens: 10,
            temperature: 0.0,
        };
        let body = text_request_body(&req);
        assert_eq!(body["model"], "gpt");
        assert_eq!(body["messages"][1]["content"], "usr");
        assert_eq!(body["max_tokens"], 10);
    }
}
