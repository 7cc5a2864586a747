//! Multiple-choice quizzes targeting the visible characteristics of a topic.

mod generate;
mod parse;

pub use generate::{generate_quiz, render_distractors, QuizOptions, QuizTemplates};
pub use parse::{parse_payload, ParsedBlock};

use std::collections::HashSet;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::digest::{read_json, sha256_hex, write_atomic};

#[derive(Debug, thiserror::Error)]
pub enum QuizError {
    #[error("text provider failed: {0}")]
    ProviderFailure(String),
    #[error("could not obtain {wanted} valid questions (have {got}) after all regeneration rounds")]
    ValidationExhausted { wanted: usize, got: usize },
    #[error("invalid quiz: {0:?}")]
    InvalidQuiz(Vec<Violation>),
    #[error("prompt template: {0}")]
    Template(String),
    #[error("quiz i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocusAttribute {
    Texture,
    Material,
    Size,
    Shape,
    Color,
    Pattern,
    Context,
    Other,
}

impl FocusAttribute {
    pub const ALL: [FocusAttribute; 8] = [
        FocusAttribute::Texture,
        FocusAttribute::Material,
        FocusAttribute::Size,
        FocusAttribute::Shape,
        FocusAttribute::Color,
        FocusAttribute::Pattern,
        FocusAttribute::Context,
        FocusAttribute::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FocusAttribute::Texture => "texture",
            FocusAttribute::Material => "material",
            FocusAttribute::Size => "size",
            FocusAttribute::Shape => "shape",
            FocusAttribute::Color => "color",
            FocusAttribute::Pattern => "pattern",
            FocusAttribute::Context => "context",
            FocusAttribute::Other => "other",
        }
    }

    /// Lenient tag parsing; unknown tags become `Other`.
    pub fn from_tag(tag: &str) -> Self {
        match tag.trim().to_ascii_lowercase().as_str() {
            "texture" => FocusAttribute::Texture,
            "material" => FocusAttribute::Material,
            "size" => FocusAttribute::Size,
            "shape" => FocusAttribute::Shape,
            "color" | "colour" => FocusAttribute::Color,
            "pattern" => FocusAttribute::Pattern,
            "context" | "setting" => FocusAttribute::Context,
            _ => FocusAttribute::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub stem: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    pub focus_attribute: FocusAttribute,
}

impl Question {
    /// Copy with whitespace runs collapsed in stem and options.
    pub fn normalized(&self) -> Self {
        Self {
            stem: normalize_ws(&self.stem),
            options: self.options.iter().map(|o| normalize_ws(o)).collect(),
            correct_index: self.correct_index,
            focus_attribute: self.focus_attribute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quiz {
    pub quiz_id: String,
    pub topic_id: String,
    pub questions: Vec<Question>,
    pub generator_model_id: String,
    pub distractors_used: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    NoQuestions,
    EmptyStem(usize),
    OptionCount(usize),
    EmptyOption(usize),
    DuplicateOptions(usize),
    OutOfRangeCorrectIndex(usize),
    QuizIdMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 6;

pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn option_key(s: &str) -> String {
    normalize_ws(s).to_lowercase()
}

/// Rule violations of a single question, tagged with `index`.
pub fn validate_question(q: &Question, index: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if q.stem.trim().is_empty() {
        out.push(Violation::EmptyStem(index));
    }
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&q.options.len()) {
        out.push(Violation::OptionCount(index));
    }
    if q.options.iter().any(|o| o.trim().is_empty()) {
        out.push(Violation::EmptyOption(index));
    }
    let mut seen = HashSet::new();
    if !q.options.iter().all(|o| seen.insert(option_key(o))) {
        out.push(Violation::DuplicateOptions(index));
    }
    if q.correct_index >= q.options.len() {
        out.push(Violation::OutOfRangeCorrectIndex(index));
    }
    out
}

fn validate_content(quiz: &Quiz) -> Vec<Violation> {
    let mut out = Vec::new();
    if quiz.questions.is_empty() {
        out.push(Violation::NoQuestions);
    }
    for (i, q) in quiz.questions.iter().enumerate() {
        out.extend(validate_question(q, i));
    }
    out
}

/// Every broken invariant; empty iff the quiz is valid.
pub fn validate_quiz(quiz: &Quiz) -> Vec<Violation> {
    let mut out = validate_content(quiz);
    if out.is_empty() {
        let id = canonical_serialize(quiz).map(|b| sha256_hex(&b)).ok();
        if id.as_deref() != Some(quiz.quiz_id.as_str()) {
            out.push(Violation::QuizIdMismatch);
        }
    }
    out
}

#[derive(Serialize)]
struct CanonicalQuestion<'a> {
    stem: String,
    options: Vec<String>,
    correct_index: usize,
    focus_attribute: &'a str,
}

#[derive(Serialize)]
struct CanonicalQuiz<'a> {
    topic_id: &'a str,
    generator_model_id: &'a str,
    distractors_used: &'a [String],
    questions: Vec<CanonicalQuestion<'a>>,
}

/// Deterministic bytes identifying the quiz content.
///
/// Compact JSON with a fixed field order (topic, generator model,
/// distractors, questions) and whitespace-normalized text, plus a trailing
/// newline. `quiz_id` and `created_at` are not part of the content.
pub fn canonical_serialize(quiz: &Quiz) -> Result<Vec<u8>, QuizError> {
    let violations = validate_content(quiz);
    if !violations.is_empty() {
        return Err(QuizError::InvalidQuiz(violations));
    }
    let canon = CanonicalQuiz {
        topic_id: &quiz.topic_id,
        generator_model_id: &quiz.generator_model_id,
        distractors_used: &quiz.distractors_used,
        questions: quiz
            .questions
            .iter()
            .map(|q| CanonicalQuestion {
                stem: normalize_ws(&q.stem),
                options: q.options.iter().map(|o| normalize_ws(o)).collect(),
                correct_index: q.correct_index,
                focus_attribute: q.focus_attribute.as_str(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&canon).expect("canonical quiz serializes");
    bytes.push(b'\n');
    Ok(bytes)
}

impl Quiz {
    /// Builds a quiz from normalized questions and assigns its content id.
    pub fn new(
        topic_id: &str,
        questions: Vec<Question>,
        generator_model_id: &str,
        distractors_used: Vec<String>,
        created_at: DateTime<Utc>,
    ) -> Result<Self, QuizError> {
        let mut quiz = Quiz {
            quiz_id: String::new(),
            topic_id: topic_id.to_string(),
            questions: questions.iter().map(Question::normalized).collect(),
            generator_model_id: generator_model_id.to_string(),
            distractors_used,
            created_at,
        };
        quiz.quiz_id = sha256_hex(&canonical_serialize(&quiz)?);
        Ok(quiz)
    }
}

/// `quizzes/<topic_id>/<quiz_id>.json`, plus an `active.json` pointer per topic.
#[derive(Debug, Clone)]
pub struct QuizStore {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ActivePointer {
    quiz_id: String,
}

impl QuizStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, topic_id: &str, quiz_id: &str) -> PathBuf {
        self.root.join(topic_id).join(format!("{quiz_id}.json"))
    }

    pub fn active_path(&self, topic_id: &str) -> PathBuf {
        self.root.join(topic_id).join("active.json")
    }

    /// Writes the quiz and marks it active for its topic.
    pub fn save(&self, quiz: &Quiz) -> Result<PathBuf, QuizError> {
        let violations = validate_quiz(quiz);
        if !violations.is_empty() {
            return Err(QuizError::InvalidQuiz(violations));
        }
        let path = self.path(&quiz.topic_id, &quiz.quiz_id);
        let mut bytes = serde_json::to_vec(quiz).expect("quiz serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        let mut ptr = serde_json::to_vec(&ActivePointer {
            quiz_id: quiz.quiz_id.clone(),
        })
        .expect("pointer serializes");
        ptr.push(b'\n');
        write_atomic(&self.active_path(&quiz.topic_id), &ptr)?;
        Ok(path)
    }

    pub fn load(&self, topic_id: &str, quiz_id: &str) -> Result<Quiz, QuizError> {
        Ok(read_json(&self.path(topic_id, quiz_id))?)
    }

    pub fn load_active(&self, topic_id: &str) -> Result<Quiz, QuizError> {
        let ptr: ActivePointer = read_json(&self.active_path(topic_id))?;
        self.load(topic_id, &ptr.quiz_id)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn question(stem: &str, options: &[&str], correct: usize) -> Question {
        Question {
            stem: stem.into(),
            options: options.iter().map(|s| s.to_string()).collect(),
            correct_index: correct,
            focus_attribute: FocusAttribute::Shape,
        }
    }

    pub(crate) fn sample_quiz() -> Quiz {
        Quiz::new(
            "gujia",
            vec![
                question("What shape is the pastry?", &["Crescent", "Square", "Round", "Star"], 0),
                question("What edge does it have?", &["Crimped", "Smooth", "Serrated", "None"], 0),
            ],
            "mock-llm",
            vec!["chandrakala".into()],
            Utc.timestamp_opt(0, 0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn valid_quiz_has_no_violations() {
        assert_eq!(validate_quiz(&sample_quiz()), vec![]);
    }

    #[test]
    fn out_of_range_correct_index() {
        let mut quiz = sample_quiz();
        quiz.questions[1].correct_index = 4;
        assert_eq!(validate_quiz(&quiz), vec![Violation::OutOfRangeCorrectIndex(1)]);
    }

    #[test]
    fn case_folded_duplicate_options() {
        let mut quiz = sample_quiz();
        quiz.questions[0].options[1] = "  crescent ".into();
        assert_eq!(validate_quiz(&quiz), vec![Violation::DuplicateOptions(0)]);
    }

    #[test]
    fn option_count_bounds() {
        let q = question("s", &["only"], 0);
        assert!(validate_question(&q, 3).contains(&Violation::OptionCount(3)));
        let q = question("s", &["a", "b", "c", "d", "e", "f", "g"], 0);
        assert!(validate_question(&q, 0).contains(&Violation::OptionCount(0)));
    }

    #[test]
    fn tampered_id_is_detected() {
        let mut quiz = sample_quiz();
        quiz.quiz_id = "0".repeat(64);
        assert_eq!(validate_quiz(&quiz), vec![Violation::QuizIdMismatch]);
    }

    #[test]
    fn serialization_is_deterministic_and_newline_terminated() {
        let quiz = sample_quiz();
        let a = canonical_serialize(&quiz).unwrap();
        assert_eq!(a, canonical_serialize(&quiz).unwrap());
        assert_eq!(a.last(), Some(&b'\n'));
    }

    #[test]
    fn field_insertion_order_does_not_matter() {
        let quiz = sample_quiz();
        let forward = serde_json::to_string(&quiz).unwrap();
        // rebuild the same record with keys inserted in reverse order
        let value: serde_json::Value = serde_json::from_str(&forward).unwrap();
        let mut reversed = serde_json::Map::new();
        let obj = value.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.reverse();
        for k in keys {
            reversed.insert(k.clone(), obj[&k].clone());
        }
        let rebuilt: Quiz = serde_json::from_value(serde_json::Value::Object(reversed)).unwrap();
        assert_eq!(canonical_serialize(&rebuilt).unwrap(), canonical_serialize(&quiz).unwrap());
    }

    #[test]
    fn whitespace_variation_normalizes_away() {
        let quiz = sample_quiz();
        let mut spaced = quiz.clone();
        spaced.questions[0].stem = "What  shape is\tthe pastry? ".into();
        assert_eq!(canonical_serialize(&spaced).unwrap(), canonical_serialize(&quiz).unwrap());
    }

    #[test]
    fn invalid_quiz_does_not_serialize() {
        let mut quiz = sample_quiz();
        quiz.questions.clear();
        assert!(matches!(canonical_serialize(&quiz), Err(QuizError::InvalidQuiz(_))));
    }

    #[test]
    fn store_round_trip_and_active_pointer() {
        let dir = tempfile::tempdir().unwrap();
        let store = QuizStore::new(dir.path());
        let quiz = sample_quiz();
        store.save(&quiz).unwrap();
        assert_eq!(store.load_active("gujia").unwrap(), quiz);
    }
}
