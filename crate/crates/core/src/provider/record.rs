//! Provider call log (JSON lines) and digest-keyed replay.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    ProviderError, TextCompletionProvider, TextRequest, TextResponse, TokenUsage, VisionProvider,
    VisionRequest, VisionResponse,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogLine {
    kind: String,
    request_digest: String,
    text: String,
    #[serde(default)]
    token_usage: TokenUsage,
}

/// Append-only JSON-lines record of provider traffic.
pub struct CallLog {
    file: Mutex<File>,
}

impl CallLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    fn append(&self, line: &LogLine) -> std::io::Result<()> {
        let mut json = serde_json::to_vec(line).map_err(std::io::Error::other)?;
        json.push(b'\n');
        let mut f = self.file.lock().expect("call log lock");
        f.write_all(&json)?;
        f.flush()
    }
}

pub struct RecordingText<P> {
    inner: P,
    log: Arc<CallLog>,
}

impl<P> RecordingText<P> {
    pub fn new(inner: P, log: Arc<CallLog>) -> Self {
        Self { inner, log }
    }
}

impl<P: TextCompletionProvider> TextCompletionProvider for RecordingText<P> {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, ProviderError> {
        let resp = self.inner.complete(request)?;
        self.log.append(&LogLine {
            kind: "text".into(),
            request_digest: request.digest(),
            text: resp.text.clone(),
            token_usage: resp.token_usage.clone(),
        })?;
        Ok(resp)
    }
}

pub struct RecordingVision<P> {
    inner: P,
    log: Arc<CallLog>,
}

impl<P> RecordingVision<P> {
    pub fn new(inner: P, log: Arc<CallLog>) -> Self {
        Self { inner, log }
    }
}

impl<P: VisionProvider> VisionProvider for RecordingVision<P> {
    fn ask(&self, request: &VisionRequest) -> Result<VisionResponse, ProviderError> {
        let resp = self.inner.ask(request)?;
        self.log.append(&LogLine {
            kind: "vision".into(),
            request_digest: request.digest(),
            text: resp.text.clone(),
            token_usage: TokenUsage::default(),
        })?;
        Ok(resp)
    }
}

/// Responses from a call log, keyed by (kind, request digest).
#[derive(Debug, Default)]
pub struct ReplayLog {
    entries: HashMap<(String, String), LogLine>,
}

impl ReplayLog {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = HashMap::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine =
                serde_json::from_str(&line).map_err(|e| ProviderError::Malformed(e.to_string()))?;
            entries.insert((parsed.kind.clone(), parsed.request_digest.clone()), parsed);
        }
        Ok(Self { entries })
    }

    fn get(&self, kind: &str, digest: &str) -> Result<&LogLine, ProviderError> {
        self.entries
            .get(&(kind.to_string(), digest.to_string()))
            .ok_or_else(|| ProviderError::MissingFixture(digest.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct ReplayText(pub Arc<ReplayLog>);

impl TextCompletionProvider for ReplayText {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, ProviderError> {
        let line = self.0.get("text", &request.digest())?;
        Ok(TextResponse {
            text: line.text.clone(),
            token_usage: line.token_usage.clone(),
        })
    }
}

pub struct ReplayVision(pub Arc<ReplayLog>);

impl VisionProvider for ReplayVision {
    fn ask(&self, request: &VisionRequest) -> Result<VisionResponse, ProviderError> {
        let line = self.0.get("vision", &request.digest())?;
        Ok(VisionResponse { text: line.text.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::FixtureTextProvider;

    #[test]
    fn record_then_replay_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calls.jsonl");
        let log = Arc::new(CallLog::open(&path).unwrap());
        let rec = RecordingText::new(FixtureTextProvider::synthesizing(), log);
        let req = TextRequest {
            model_id: "m".into(),
            system_text: "s".into(),
            user_text: "Write exactly 2 questions".into(),
            max_tokens: 5,
            temperature: 0.0,
        };
        let live = rec.complete(&req).unwrap();
        let replay = ReplayText(Arc::new(ReplayLog::load(&path).unwrap()));
        assert_eq!(replay.complete(&req).unwrap(), live);
        let mut other = req.clone();
        other.user_text.push('!');
        assert!(replay.complete(&other).is_err());
    }
}
