//! Deterministic stand-ins for the text and vision models.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use regex::Regex;

use super::{
    ProviderError, TextCompletionProvider, TextRequest, TextResponse, TokenUsage, VisionProvider,
    VisionRequest, VisionResponse,
};
use crate::digest::sha256_hex;
use crate::quiz::{FocusAttribute, Quiz};
use crate::rng::{derive_seed, SplitMix64};
use crate::scorer::question_prompt;

/// Text provider whose response is a pure function of the request digest.
///
/// Looks for `<dir>/<request digest>.txt`; when absent and synthesis is on,
/// writes a well-formed quiz payload seeded by the digest.
pub struct FixtureTextProvider {
    dir: Option<PathBuf>,
    synthesize: bool,
    calls: Mutex<Vec<TextRequest>>,
}

impl FixtureTextProvider {
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            synthesize: false,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn synthesizing() -> Self {
        Self {
            dir: None,
            synthesize: true,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_synthesis(mut self, on: bool) -> Self {
        self.synthesize = on;
        self
    }

    /// Every request received so far, in arrival order.
    pub fn calls(&self) -> Vec<TextRequest> {
        self.calls.lock().expect("call log").clone()
    }
}

impl TextCompletionProvider for FixtureTextProvider {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, ProviderError> {
        self.calls.lock().expect("call log").push(request.clone());
        let digest = request.digest();
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{digest}.txt"));
            if path.exists() {
                return Ok(TextResponse {
                    text: fs::read_to_string(path)?,
                    token_usage: TokenUsage::default(),
                });
            }
        }
        if self.synthesize {
            return Ok(TextResponse {
                text: synthesize_quiz_payload(request),
                token_usage: TokenUsage::default(),
            });
        }
        Err(ProviderError::MissingFixture(digest))
    }
}

const VOCAB: &[&str] = &[
    "smooth", "ridged", "glossy", "matte", "crescent", "round", "oval", "golden", "pale", "dark",
    "speckled", "striped", "small", "large", "flat", "domed", "crimped", "braided", "layered",
    "hollow", "blue", "gray", "white", "brown", "scalloped", "fringed", "pointed", "tapered",
];

/// A valid quiz payload in the provider grammar, seeded by the request digest.
///
/// The question count is read from an `exactly N` phrase in the user text
/// (10 when absent).
pub fn synthesize_quiz_payload(request: &TextRequest) -> String {
    let count = Regex::new(r"(?i)exactly\s+(\d+)")
        .expect("static regex")
        .captures(&request.user_text)
        .and_then(|c| c[1].parse::<usize>().ok())
        .unwrap_or(10);
    let digest = request.digest();
    let mut rng = SplitMix64::new(derive_seed(&[&digest]));
    let mut out = String::new();
    for i in 0..count {
        let attr = FocusAttribute::ALL[i % FocusAttribute::ALL.len()];
        let picks = rng.sample_indices(VOCAB.len(), 4);
        let answer = rng.bounded(4) as usize;
        out.push_str(&format!(
            "Question {}: Which {} detail best matches the subject (item {}, variant {:04x})?\n",
            i + 1,
            attr.as_str(),
            i + 1,
            rng.bounded(0x10000)
        ));
        for (j, &w) in picks.iter().enumerate() {
            out.push_str(&format!("{}) {}\n", (b'A' + j as u8) as char, VOCAB[w]));
        }
        out.push_str(&format!("Answer: {}\n", (b'A' + answer as u8) as char));
        out.push_str(&format!("Attribute: {}\n\n", attr.as_str()));
    }
    out
}

/// Maps the digest of a rendered question prompt to (correct index, option count).
#[derive(Debug, Clone, Default)]
pub struct AnswerKey {
    entries: HashMap<String, (usize, usize)>,
}

impl AnswerKey {
    pub fn from_quizzes<'a>(quizzes: impl IntoIterator<Item = &'a Quiz>) -> Self {
        let mut key = Self::default();
        for q in quizzes {
            key.insert_quiz(q);
        }
        key
    }

    pub fn insert_quiz(&mut self, quiz: &Quiz) {
        for q in &quiz.questions {
            self.entries.insert(
                sha256_hex(question_prompt(q).as_bytes()),
                (q.correct_index, q.options.len()),
            );
        }
    }

    pub fn lookup(&self, user_text: &str) -> Option<(usize, usize)> {
        self.entries.get(&sha256_hex(user_text.as_bytes())).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mean channel intensity in `[0, 1]`; the hidden "quality" the mock VLM keys on.
pub fn image_quality(bytes: &[u8]) -> Option<f64> {
    let img = image::load_from_memory(bytes).ok()?.to_rgb8();
    let raw = img.as_raw();
    if raw.is_empty() {
        return None;
    }
    let sum: u64 = raw.iter().map(|&b| b as u64).sum();
    Some(sum as f64 / (raw.len() as f64 * 255.0))
}

/// Vision mock that answers correctly with probability equal to the image's
/// mean intensity.
///
/// The draw for a given (image digest, question digest, salt) is fixed, so
/// the mock is deterministic; across questions the expected accuracy of an
/// image equals its quality. Unknown questions and undecodable images get a
/// refusal.
pub struct QualityMockVision {
    key: RwLock<AnswerKey>,
    salt: String,
    calls: AtomicUsize,
    qualities: Mutex<HashMap<String, Option<f64>>>,
}

impl QualityMockVision {
    pub fn new(key: AnswerKey, salt: u64) -> Self {
        Self {
            key: RwLock::new(key),
            salt: salt.to_string(),
            calls: AtomicUsize::new(0),
            qualities: Mutex::new(HashMap::new()),
        }
    }

    pub fn add_quiz(&self, quiz: &Quiz) {
        self.key.write().expect("answer key").insert_quiz(quiz);
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl VisionProvider for QualityMockVision {
    fn ask(&self, request: &VisionRequest) -> Result<VisionResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let image_digest = sha256_hex(&request.image_bytes);
        let quality = {
            let mut cache = self.qualities.lock().expect("quality cache");
            *cache
                .entry(image_digest.clone())
                .or_insert_with(|| image_quality(&request.image_bytes))
        };
        let entry = self.key.read().expect("answer key").lookup(&request.user_text);
        let (Some(quality), Some((correct, n))) = (quality, entry) else {
            return Ok(VisionResponse {
                text: "I cannot determine that from the image.".into(),
            });
        };
        let question_digest = sha256_hex(request.user_text.as_bytes());
        let mut rng = SplitMix64::new(derive_seed(&[&image_digest, &question_digest, &self.salt]));
        let chosen = if rng.next_f64() < quality {
            correct
        } else {
            let other = rng.bounded((n - 1) as u64) as usize;
            if other >= correct { other + 1 } else { other }
        };
        let letter = (b'A' + chosen as u8) as char;
        let text = match rng.bounded(4) {
            0 => format!("Answer: {letter}"),
            1 => letter.to_string(),
            2 => format!("The answer is ({}).", letter.to_ascii_lowercase()),
            _ => format!("{letter}) based on the visible features."),
        };
        Ok(VisionResponse { text })
    }
}
