//! Ranking of scored candidates and the experimental selection conditions.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::CandidateImage;
use crate::digest::{read_json, write_json_atomic};
use crate::rng::SplitMix64;
use crate::scorer::ScoreRecord;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("records come from different quizzes or vision models")]
    MixedQuiz,
    #[error("subject {0} appears more than once")]
    DuplicateSubject(String),
    #[error("ranking is empty")]
    EmptyRanking,
    #[error("corpus has no usable candidates")]
    EmptyCorpus,
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionKind {
    NoLoRA,
    LoRARandomK,
    QZLoRATopK,
    RealRandomK,
    RealTopK,
}

impl ConditionKind {
    fn prefix(self) -> &'static str {
        match self {
            ConditionKind::NoLoRA => "no-lora",
            ConditionKind::LoRARandomK => "lora-random",
            ConditionKind::QZLoRATopK => "qzlora-top",
            ConditionKind::RealRandomK => "real-random",
            ConditionKind::RealTopK => "real-top",
        }
    }

    /// Conditions that need a trained LoRA.
    pub fn uses_lora(self) -> bool {
        matches!(self, ConditionKind::LoRARandomK | ConditionKind::QZLoRATopK)
    }

    /// Conditions scored on existing images rather than generated ones.
    pub fn is_real(self) -> bool {
        matches!(self, ConditionKind::RealRandomK | ConditionKind::RealTopK)
    }

    pub fn is_top_k(self) -> bool {
        matches!(self, ConditionKind::QZLoRATopK | ConditionKind::RealTopK)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Realistic,
    Illustration,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Realistic => "realistic",
            Style::Illustration => "illustration",
        }
    }
}

impl FromStr for Style {
    type Err = SelectError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "realistic" => Ok(Style::Realistic),
            "illustration" => Ok(Style::Illustration),
            other => Err(SelectError::InvalidCondition(format!("unknown style {other:?}"))),
        }
    }
}

/// One experimental setting, labelled like `qzlora-top-15/realistic`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Condition {
    pub kind: ConditionKind,
    pub k: usize,
    pub style: Style,
}

impl Condition {
    pub fn new(kind: ConditionKind, k: usize, style: Style) -> Result<Self, SelectError> {
        if (kind == ConditionKind::NoLoRA) != (k == 0) {
            return Err(SelectError::InvalidCondition(format!(
                "{} requires {}",
                kind.prefix(),
                if kind == ConditionKind::NoLoRA { "k = 0" } else { "k >= 1" }
            )));
        }
        Ok(Self { kind, k, style })
    }

    pub fn no_lora(style: Style) -> Self {
        Self {
            kind: ConditionKind::NoLoRA,
            k: 0,
            style,
        }
    }

    /// Label without the style: what selection and training depend on.
    pub fn selection_label(&self) -> String {
        match self.kind {
            ConditionKind::NoLoRA => "no-lora".into(),
            kind => format!("{}-{}", kind.prefix(), self.k),
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.selection_label(), self.style.as_str())
    }

    /// The label with `/` replaced, for use as a single path component.
    pub fn file_stem(&self) -> String {
        self.label().replace('/', "_")
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Condition {
    type Err = SelectError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SelectError::InvalidCondition(s.to_string());
        let (head, style) = s.split_once('/').ok_or_else(bad)?;
        let style: Style = style.parse()?;
        if head == "no-lora" {
            return Ok(Condition::no_lora(style));
        }
        let (prefix, k) = head.rsplit_once('-').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let kind = [
            ConditionKind::LoRARandomK,
            ConditionKind::QZLoRATopK,
            ConditionKind::RealRandomK,
            ConditionKind::RealTopK,
        ]
        .into_iter()
        .find(|kind| kind.prefix() == prefix)
        .ok_or_else(bad)?;
        Condition::new(kind, k, style)
    }
}

impl TryFrom<String> for Condition {
    type Error = SelectError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Condition> for String {
    fn from(c: Condition) -> Self {
        c.label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSubject {
    pub subject_id: String,
    pub accuracy: f64,
}

/// Descending accuracy, ties by ascending subject id.
pub fn rank_order(a: &RankedSubject, b: &RankedSubject) -> Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then_with(|| a.subject_id.cmp(&b.subject_id))
}

pub fn rank(records: &[ScoreRecord]) -> Result<Vec<RankedSubject>, SelectError> {
    if let Some(first) = records.first() {
        if records
            .iter()
            .any(|r| r.quiz_id != first.quiz_id || r.vlm_model_id != first.vlm_model_id)
        {
            return Err(SelectError::MixedQuiz);
        }
    }
    let mut seen = HashSet::new();
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.subject_id.as_str())) {
        return Err(SelectError::DuplicateSubject(dup.subject_id.clone()));
    }
    let mut out: Vec<RankedSubject> = records
        .iter()
        .map(|r| RankedSubject {
            subject_id: r.subject_id.clone(),
            accuracy: r.accuracy,
        })
        .collect();
    out.sort_by(rank_order);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub topic_id: String,
    pub condition: Condition,
    pub image_ids: Vec<String>,
    /// Set for random conditions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Set for top-k conditions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_quiz_id: Option<String>,
    /// Fewer candidates than `condition.k` were available.
    #[serde(default)]
    pub short: bool,
}

/// The first `min(k, |ranking|)` subjects of a ranking.
pub fn select_top_k(
    topic_id: &str,
    ranking: &[RankedSubject],
    condition: Condition,
    source_quiz_id: &str,
) -> Result<SelectionSet, SelectError> {
    if !condition.kind.is_top_k() || condition.k == 0 {
        return Err(SelectError::InvalidCondition(condition.label()));
    }
    if ranking.is_empty() {
        return Err(SelectError::EmptyRanking);
    }
    let take = condition.k.min(ranking.len());
    Ok(SelectionSet {
        topic_id: topic_id.to_string(),
        condition,
        image_ids: ranking[..take].iter().map(|r| r.subject_id.clone()).collect(),
        seed: None,
        source_quiz_id: Some(source_quiz_id.to_string()),
        short: take < condition.k,
    })
}

/// Uniform sample without replacement over the non-corrupt candidates,
/// taken in fetch order, using the crate's documented SplitMix64 sampler.
pub fn select_random_k(
    topic_id: &str,
    corpus: &[CandidateImage],
    condition: Condition,
    seed: u64,
) -> Result<SelectionSet, SelectError> {
    if !matches!(condition.kind, ConditionKind::LoRARandomK | ConditionKind::RealRandomK) || condition.k == 0 {
        return Err(SelectError::InvalidCondition(condition.label()));
    }
    let mut pool: Vec<&CandidateImage> = corpus.iter().filter(|c| !c.corrupt).collect();
    if pool.is_empty() {
        return Err(SelectError::EmptyCorpus);
    }
    pool.sort_by_key(|c| c.fetch_index);
    let picks = SplitMix64::new(seed).sample_indices(pool.len(), condition.k);
    Ok(SelectionSet {
        topic_id: topic_id.to_string(),
        condition,
        image_ids: picks.iter().map(|&i| pool[i].image_id.clone()).collect(),
        seed: Some(seed),
        source_quiz_id: None,
        short: picks.len() < condition.k,
    })
}

/// `selections/<topic_id>/<condition-label>.json`.
#[derive(Debug, Clone)]
pub struct SelectionStore {
    root: PathBuf,
}

impl SelectionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, topic_id: &str, condition: &Condition) -> PathBuf {
        self.root.join(topic_id).join(format!("{}.json", condition.label()))
    }

    pub fn save(&self, set: &SelectionSet) -> std::io::Result<PathBuf> {
        let path = self.path(&set.topic_id, &set.condition);
        write_json_atomic(&path, set)?;
        Ok(path)
    }

    pub fn load(&self, topic_id: &str, condition: &Condition) -> std::io::Result<SelectionSet> {
        read_json(&self.path(topic_id, condition))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn rec(id: &str, acc: f64) -> ScoreRecord {
        ScoreRecord {
            subject_id: id.into(),
            subject_hash: format!("h-{id}"),
            quiz_id: "q".into(),
            vlm_model_id: "m".into(),
            verdicts: vec![],
            accuracy: acc,
            scored_at: chrono::Utc.timestamp_opt(0, 0).unwrap(),
        }
    }

    fn ids(r: &[RankedSubject]) -> Vec<&str> {
        r.iter().map(|s| s.subject_id.as_str()).collect()
    }

    fn top(k: usize) -> Condition {
        Condition::new(ConditionKind::QZLoRATopK, k, Style::Realistic).unwrap()
    }

    fn candidates(n: usize) -> Vec<CandidateImage> {
        (0..n)
            .map(|i| CandidateImage {
                image_id: format!("t-{i:03}"),
                topic_id: "t".into(),
                content_hash: format!("{i}"),
                source_url: String::new(),
                caption: String::new(),
                width: 256,
                height: 256,
                fetch_index: i,
                file_name: format!("{i:03}.png"),
                corrupt: false,
            })
            .collect()
    }

    #[test]
    fn rank_examples() {
        let r = rank(&[rec("a", 0.8), rec("b", 0.6), rec("c", 0.9)]).unwrap();
        assert_eq!(ids(&r), ["c", "a", "b"]);
        let r = rank(&[rec("b", 0.7), rec("a", 0.7)]).unwrap();
        assert_eq!(ids(&r), ["a", "b"]);
    }

    #[test]
    fn mixed_quiz_rejected() {
        let mut other = rec("b", 0.1);
        other.quiz_id = "q2".into();
        assert_eq!(rank(&[rec("a", 0.5), other]), Err(SelectError::MixedQuiz));
        assert_eq!(
            rank(&[rec("a", 0.5), rec("a", 0.4)]),
            Err(SelectError::DuplicateSubject("a".into()))
        );
    }

    #[test]
    fn top_k_sizes() {
        let records: Vec<_> = (0..55).map(|i| rec(&format!("s{i:02}"), (i % 7) as f64 / 7.0)).collect();
        let ranking = rank(&records).unwrap();
        let s15 = select_top_k("t", &ranking, top(15), "q").unwrap();
        assert_eq!(s15.image_ids, ids(&ranking[..15]));
        assert!(!s15.short);
        let s2 = select_top_k("t", &ranking, top(2), "q").unwrap();
        assert_eq!(s2.image_ids.len(), 2);
        let one = select_top_k("t", &ranking[..1], top(2), "q").unwrap();
        assert_eq!(one.image_ids.len(), 1);
        assert!(one.short);
        assert_eq!(select_top_k("t", &[], top(2), "q"), Err(SelectError::EmptyRanking));
    }

    #[test]
    fn random_k_is_seeded() {
        let cond = Condition::new(ConditionKind::LoRARandomK, 15, Style::Realistic).unwrap();
        let corpus = candidates(55);
        let a = select_random_k("t", &corpus, cond, 7).unwrap();
        let b = select_random_k("t", &corpus, cond, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image_ids.len(), 15);
        let c = select_random_k("t", &corpus, cond, 8).unwrap();
        assert_ne!(a.image_ids, c.image_ids);
        let small = select_random_k("t", &corpus[..10], cond, 7).unwrap();
        assert_eq!(small.image_ids.len(), 10);
        assert!(small.short);
    }

    #[test]
    fn random_k_skips_corrupt() {
        let cond = Condition::new(ConditionKind::RealRandomK, 5, Style::Realistic).unwrap();
        let mut corpus = candidates(6);
        corpus[2].corrupt = true;
        let s = select_random_k("t", &corpus, cond, 1).unwrap();
        assert!(!s.image_ids.contains(&"t-002".to_string()));
        for c in &mut corpus {
            c.corrupt = true;
        }
        assert_eq!(select_random_k("t", &corpus, cond, 1), Err(SelectError::EmptyCorpus));
    }

    #[test]
    fn labels_round_trip() {
        for label in [
            "no-lora/realistic",
            "no-lora/illustration",
            "lora-random-15/realistic",
            "qzlora-top-2/realistic",
            "qzlora-top-15/illustration",
            "real-random-5/realistic",
            "real-top-5/realistic",
        ] {
            let c: Condition = label.parse().unwrap();
            assert_eq!(c.label(), label);
        }
        assert!("no-lora-3/realistic".parse::<Condition>().is_err());
        assert!("qzlora-top-0/realistic".parse::<Condition>().is_err());
        assert!("qzlora-top-2/watercolor".parse::<Condition>().is_err());
        assert!(Condition::new(ConditionKind::NoLoRA, 3, Style::Realistic).is_err());
    }
}
