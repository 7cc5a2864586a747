//! Administers a quiz to a vision model, one request per question with the
//! image attached, and records per-question verdicts.

mod answer;

pub use answer::{parse_answer, ParsedAnswer};

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::digest::{read_json, sha256_hex, write_json_atomic};
use crate::provider::{media_type_of, VisionProvider, VisionRequest};
use crate::quiz::{validate_quiz, Question, Quiz};
use crate::retry::RetryPolicy;
use crate::util::{parallel_map, Clock};

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("vision provider failed on question {question}: {message}")]
    ProviderFailure { question: usize, message: String },
    #[error("image {0} cannot be decoded")]
    UndecodableImage(String),
    #[error("quiz is invalid")]
    InvalidQuiz,
    #[error("score i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub question_index: usize,
    /// `None` when the reply named no in-range option.
    pub chosen_index: Option<usize>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub subject_id: String,
    pub subject_hash: String,
    pub quiz_id: String,
    pub vlm_model_id: String,
    pub verdicts: Vec<Verdict>,
    pub accuracy: f64,
    pub scored_at: DateTime<Utc>,
}

impl ScoreRecord {
    pub fn correct_count(&self) -> usize {
        self.verdicts.iter().filter(|v| v.correct).count()
    }
}

/// The user text sent for one question; also what the mock's answer key hashes.
pub fn question_prompt(q: &Question) -> String {
    let mut out = String::new();
    out.push_str(&q.stem);
    out.push('\n');
    for (i, opt) in q.options.iter().enumerate() {
        out.push((b'A' + i as u8) as char);
        out.push_str(") ");
        out.push_str(opt);
        out.push('\n');
    }
    out.push_str("Reply with the letter of the correct option.");
    out
}

#[derive(Debug, Clone)]
pub struct ScoringOptions {
    pub model_id: String,
    pub system_text: String,
    pub retry: RetryPolicy,
    pub clock: Clock,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            model_id: "gpt-4o-2024-11-20".into(),
            system_text: "Look at the image and answer the multiple-choice question using only \
                          what the image shows."
                .into(),
            retry: RetryPolicy::default(),
            clock: Clock::System,
        }
    }
}

/// `scores/<quiz_id>/<subject_hash>.json`, each file a map from VLM model id
/// to record. Existing entries are never rewritten.
#[derive(Debug)]
pub struct ScoreStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl ScoreStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn path(&self, quiz_id: &str, subject_hash: &str) -> PathBuf {
        self.root.join(quiz_id).join(format!("{subject_hash}.json"))
    }

    fn read_map(path: &Path) -> io::Result<BTreeMap<String, ScoreRecord>> {
        if path.exists() {
            read_json(path)
        } else {
            Ok(BTreeMap::new())
        }
    }

    pub fn get(&self, subject_hash: &str, quiz_id: &str, vlm_model_id: &str) -> io::Result<Option<ScoreRecord>> {
        Ok(Self::read_map(&self.path(quiz_id, subject_hash))?.remove(vlm_model_id))
    }

    pub fn put(&self, record: &ScoreRecord) -> io::Result<()> {
        let _guard = self.write_lock.lock().expect("score store lock");
        let path = self.path(&record.quiz_id, &record.subject_hash);
        let mut map = Self::read_map(&path)?;
        if map.contains_key(&record.vlm_model_id) {
            return Ok(());
        }
        map.insert(record.vlm_model_id.clone(), record.clone());
        write_json_atomic(&path, &map)
    }
}

fn check_decodable(subject_id: &str, bytes: &[u8]) -> Result<(), ScoreError> {
    image::load_from_memory(bytes)
        .map(|_| ())
        .map_err(|_| ScoreError::UndecodableImage(subject_id.to_string()))
}

/// Scores one image against every question of `quiz`, in stored order.
///
/// With a store, a cached record for (image digest, quiz, model) is returned
/// without provider calls, and fresh records are cached. Any question that
/// still fails after retries aborts the whole record.
pub fn score_image(
    subject_id: &str,
    image_bytes: &[u8],
    quiz: &Quiz,
    provider: &dyn VisionProvider,
    opts: &ScoringOptions,
    store: Option<&ScoreStore>,
) -> Result<ScoreRecord, ScoreError> {
    let subject_hash = sha256_hex(image_bytes);
    if let Some(store) = store {
        if let Some(mut hit) = store.get(&subject_hash, &quiz.quiz_id, &opts.model_id)? {
            hit.subject_id = subject_id.to_string();
            return Ok(hit);
        }
    }
    if !validate_quiz(quiz).is_empty() {
        return Err(ScoreError::InvalidQuiz);
    }
    check_decodable(subject_id, image_bytes)?;
    let media_type = media_type_of(image_bytes).to_string();
    let mut verdicts = Vec::with_capacity(quiz.questions.len());
    for (i, q) in quiz.questions.iter().enumerate() {
        let request = VisionRequest {
            model_id: opts.model_id.clone(),
            system_text: opts.system_text.clone(),
            user_text: question_prompt(q),
            image_bytes: image_bytes.to_vec(),
            media_type: media_type.clone(),
        };
        let reply = opts
            .retry
            .run(|_| provider.ask(&request))
            .map_err(|e| ScoreError::ProviderFailure {
                question: i,
                message: e.to_string(),
            })?;
        let chosen = parse_answer(&reply.text, q.options.len()).index();
        verdicts.push(Verdict {
            question_index: i,
            chosen_index: chosen,
            correct: chosen == Some(q.correct_index),
        });
    }
    let correct = verdicts.iter().filter(|v| v.correct).count();
    let record = ScoreRecord {
        subject_id: subject_id.to_string(),
        subject_hash,
        quiz_id: quiz.quiz_id.clone(),
        vlm_model_id: opts.model_id.clone(),
        accuracy: correct as f64 / verdicts.len() as f64,
        verdicts,
        scored_at: opts.clock.now(),
    };
    if let Some(store) = store {
        store.put(&record)?;
    }
    Ok(record)
}

/// An image to score: an id plus where its bytes live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subject {
    pub subject_id: String,
    pub path: PathBuf,
}

/// Scores every subject; results are in input order and failures stay per-subject.
pub fn score_batch(
    subjects: &[Subject],
    quiz: &Quiz,
    provider: &dyn VisionProvider,
    opts: &ScoringOptions,
    store: Option<&ScoreStore>,
    parallelism: usize,
) -> Vec<Result<ScoreRecord, ScoreError>> {
    assert!(parallelism >= 1, "parallelism must be at least 1");
    parallel_map(subjects, parallelism, |s| {
        let bytes = fs::read(&s.path)?;
        score_image(&s.subject_id, &bytes, quiz, provider, opts, store)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ProviderError, VisionResponse};
    use crate::quiz::tests::sample_quiz;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn png(level: u8) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([level, level, level]));
        let mut out = io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn opts() -> ScoringOptions {
        ScoringOptions {
            model_id: "mock-vlm".into(),
            retry: RetryPolicy::immediate(3),
            ..ScoringOptions::default()
        }
    }

    /// Replies with the correct letter, or a fixed letter.
    struct Oracle {
        quiz: Quiz,
        fixed: Option<&'static str>,
        calls: AtomicUsize,
    }

    impl VisionProvider for Oracle {
        fn ask(&self, req: &VisionRequest) -> Result<VisionResponse, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if let Some(f) = self.fixed {
                return Ok(VisionResponse { text: f.into() });
            }
            let q = self
                .quiz
                .questions
                .iter()
                .find(|q| question_prompt(q) == req.user_text)
                .unwrap();
            Ok(VisionResponse {
                text: format!("Answer: {}", (b'A' + q.correct_index as u8) as char),
            })
        }
    }

    #[test]
    fn all_correct_and_out_of_range() {
        let quiz = sample_quiz();
        let good = Oracle {
            quiz: quiz.clone(),
            fixed: None,
            calls: AtomicUsize::new(0),
        };
        let r = score_image("img", &png(10), &quiz, &good, &opts(), None).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(good.calls.load(Ordering::SeqCst), quiz.questions.len());

        let bad = Oracle {
            quiz: quiz.clone(),
            fixed: Some("E"),
            calls: AtomicUsize::new(0),
        };
        let r = score_image("img", &png(10), &quiz, &bad, &opts(), None).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert!(r.verdicts.iter().all(|v| v.chosen_index.is_none() && !v.correct));
    }

    #[test]
    fn failure_aborts_without_caching() {
        struct Flaky(AtomicUsize);
        impl VisionProvider for Flaky {
            fn ask(&self, _: &VisionRequest) -> Result<VisionResponse, ProviderError> {
                // first question succeeds, the rest fail
                if self.0.fetch_add(1, Ordering::SeqCst) == 0 {
                    Ok(VisionResponse { text: "A".into() })
                } else {
                    Err(ProviderError::Http("timeout".into()))
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let store = ScoreStore::new(dir.path());
        let quiz = sample_quiz();
        let bytes = png(1);
        let err = score_image("x", &bytes, &quiz, &Flaky(AtomicUsize::new(0)), &opts(), Some(&store)).unwrap_err();
        assert!(matches!(err, ScoreError::ProviderFailure { question: 1, .. }));
        assert!(store.get(&sha256_hex(&bytes), &quiz.quiz_id, "mock-vlm").unwrap().is_none());
    }

    #[test]
    fn cache_hit_is_identical_and_free() {
        let dir = tempfile::tempdir().unwrap();
        let store = ScoreStore::new(dir.path());
        let quiz = sample_quiz();
        let p = Oracle {
            quiz: quiz.clone(),
            fixed: None,
            calls: AtomicUsize::new(0),
        };
        let first = score_image("a", &png(3), &quiz, &p, &opts(), Some(&store)).unwrap();
        let n = p.calls.load(Ordering::SeqCst);
        let second = score_image("a", &png(3), &quiz, &p, &opts(), Some(&store)).unwrap();
        assert_eq!(p.calls.load(Ordering::SeqCst), n);
        assert_eq!(serde_json::to_vec(&first).unwrap(), serde_json::to_vec(&second).unwrap());

        let mut other_model = opts();
        other_model.model_id = "other-vlm".into();
        score_image("a", &png(3), &quiz, &p, &other_model, Some(&store)).unwrap();
        assert!(p.calls.load(Ordering::SeqCst) > n, "model id is part of the cache key");
    }

    #[test]
    fn undecodable_image() {
        let quiz = sample_quiz();
        let p = Oracle {
            quiz: quiz.clone(),
            fixed: None,
            calls: AtomicUsize::new(0),
        };
        let err = score_image("junk", b"not an image", &quiz, &p, &opts(), None).unwrap_err();
        assert!(matches!(err, ScoreError::UndecodableImage(_)));
        assert_eq!(p.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn prompt_lists_lettered_options() {
        let quiz = sample_quiz();
        let p = question_prompt(&quiz.questions[0]);
        assert!(p.starts_with("What shape is the pastry?\nA) Crescent\nB) Square\n"));
    }
}
