use std::collections::HashSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{normalize_ws, parse_payload, validate_question, Question, Quiz, QuizError};
use crate::corpus::Topic;
use crate::provider::{TextCompletionProvider, TextRequest};
use crate::retry::RetryPolicy;

/// Prompt templates with `{name}` placeholders.
///
/// `user` must contain `{topic_summary}`, `{distractor_summaries}` and
/// `{question_count}`; it may also use `{option_count}` and
/// `{option_letters}`. `regenerate` is appended to the rendered user prompt
/// when replacing invalid questions and must contain `{accepted_stems}` and
/// `{round}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizTemplates {
    pub system: String,
    pub user: String,
    pub regenerate: String,
}

impl Default for QuizTemplates {
    fn default() -> Self {
        Self {
            system: "You write multiple-choice tests that check whether a picture shows a specific \
                     subject. A person who can only see the picture should be able to answer every \
                     question."
                .into(),
            user: "Target topic: {topic_summary}\n\n\
                   Similar topics it is easily confused with:\n{distractor_summaries}\n\n\
                   Write exactly {question_count} multiple-choice questions about visible \
                   characteristics that distinguish the target topic from the similar topics, \
                   such as its texture, material, size, shape, color or pattern. Each question \
                   has {option_count} options labelled {option_letters} and exactly one correct \
                   option.\n\n\
                   Use this format for every question:\n\
                   Question N: <question text>\n\
                   A) <option>\n\
                   B) <option>\n\
                   ...\n\
                   Answer: <letter>\n\
                   Attribute: <texture|material|size|shape|color|pattern|context|other>\n"
                .into(),
            regenerate: "\nThese questions are already accepted; write different ones \
                         (regeneration round {round}):\n{accepted_stems}\n"
                .into(),
        }
    }
}

impl QuizTemplates {
    pub fn check(&self) -> Result<(), QuizError> {
        for ph in ["{topic_summary}", "{distractor_summaries}", "{question_count}"] {
            if !self.user.contains(ph) {
                return Err(QuizError::Template(format!("user template lacks {ph}")));
            }
        }
        for ph in ["{accepted_stems}", "{round}"] {
            if !self.regenerate.contains(ph) {
                return Err(QuizError::Template(format!("regenerate template lacks {ph}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QuizOptions {
    pub question_count: usize,
    pub option_count: usize,
    /// Regeneration rounds after the first request.
    pub rounds: usize,
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub templates: QuizTemplates,
    pub retry: RetryPolicy,
}

impl Default for QuizOptions {
    fn default() -> Self {
        Self {
            question_count: 10,
            option_count: 4,
            rounds: 3,
            model_id: "gpt-4o-2024-11-20".into(),
            max_tokens: 4096,
            temperature: 0.0,
            templates: QuizTemplates::default(),
            retry: RetryPolicy::default(),
        }
    }
}

pub fn render_distractors(distractors: &[(String, String)]) -> String {
    if distractors.is_empty() {
        return "(none)".into();
    }
    distractors
        .iter()
        .map(|(id, text)| format!("- {id}: {}", normalize_ws(text)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_user(opts: &QuizOptions, topic: &Topic, distractors: &str, count: usize) -> String {
    let letters: Vec<String> = (0..opts.option_count)
        .map(|i| ((b'A' + i as u8) as char).to_string())
        .collect();
    opts.templates
        .user
        .replace("{topic_summary}", &normalize_ws(&topic.summary_sentence))
        .replace("{distractor_summaries}", distractors)
        .replace("{question_count}", &count.to_string())
        .replace("{option_count}", &opts.option_count.to_string())
        .replace("{option_letters}", &letters.join(", "))
}

/// Asks the text model for a quiz and validates it question by question.
///
/// Invalid or missing questions are replaced through up to `opts.rounds`
/// regeneration requests that ask only for the shortfall; valid questions
/// are kept. Duplicate stems count as invalid.
pub fn generate_quiz(
    topic: &Topic,
    distractor_summaries: &[(String, String)],
    opts: &QuizOptions,
    provider: &dyn TextCompletionProvider,
    created_at: DateTime<Utc>,
) -> Result<Quiz, QuizError> {
    assert!(opts.question_count >= 1, "question_count must be at least 1");
    opts.templates.check()?;
    let distractors = render_distractors(distractor_summaries);
    let mut accepted: Vec<Question> = Vec::new();
    let mut stems: HashSet<String> = HashSet::new();

    for round in 0..=opts.rounds {
        let wanted = opts.question_count - accepted.len();
        let mut user_text = render_user(opts, topic, &distractors, wanted);
        if round > 0 {
            let listed = accepted
                .iter()
                .map(|q| format!("- {}", q.stem))
                .collect::<Vec<_>>()
                .join("\n");
            user_text.push_str(
                &opts
                    .templates
                    .regenerate
                    .replace("{accepted_stems}", if listed.is_empty() { "(none)" } else { &listed })
                    .replace("{round}", &round.to_string()),
            );
        }
        let request = TextRequest {
            model_id: opts.model_id.clone(),
            system_text: opts.templates.system.clone(),
            user_text,
            max_tokens: opts.max_tokens,
            temperature: opts.temperature,
        };
        let response = opts
            .retry
            .run(|_| provider.complete(&request))
            .map_err(|e| QuizError::ProviderFailure(e.to_string()))?;
        for block in parse_payload(&response.text) {
            if accepted.len() == opts.question_count {
                break;
            }
            match block {
                Ok(q) => {
                    let q = q.normalized();
                    let problems = validate_question(&q, accepted.len());
                    if !problems.is_empty() {
                        log::debug!("{}: rejecting question {:?}: {problems:?}", topic.topic_id, q.stem);
                        continue;
                    }
                    if stems.insert(q.stem.to_lowercase()) {
                        accepted.push(q);
                    }
                }
                Err(reason) => log::debug!("{}: unparseable block: {reason}", topic.topic_id),
            }
        }
        if accepted.len() == opts.question_count {
            let used = distractor_summaries.iter().map(|(id, _)| id.clone()).collect();
            return Quiz::new(&topic.topic_id, accepted, &opts.model_id, used, created_at);
        }
    }
    Err(QuizError::ValidationExhausted {
        wanted: opts.question_count,
        got: accepted.len(),
    })
}
