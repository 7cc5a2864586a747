use std::collections::HashSet;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use qzlora_core::corpus::CandidateImage;
use qzlora_core::quiz::{FocusAttribute, Question, Quiz};
use qzlora_core::scorer::ScoreRecord;
use qzlora_core::selector::{rank, select_random_k, select_top_k, Condition, ConditionKind, Style};

fn record(id: &str, acc: f64) -> ScoreRecord {
    ScoreRecord {
        subject_id: id.into(),
        subject_hash: format!("h{id}"),
        quiz_id: "q".into(),
        vlm_model_id: "m".into(),
        verdicts: vec![],
        accuracy: acc,
        scored_at: Utc.timestamp_opt(0, 0).unwrap(),
    }
}

fn candidates(n: usize) -> Vec<CandidateImage> {
    (0..n)
        .map(|i| CandidateImage {
            image_id: format!("t-{i:03}"),
            topic_id: "t".into(),
            content_hash: format!("{i:064x}"),
            source_url: format!("file://{i}"),
            caption: String::new(),
            width: 256,
            height: 256,
            fetch_index: i,
            file_name: format!("{i:03}.png"),
            corrupt: false,
        })
        .collect()
}

proptest! {
    #[test]
    fn top_k_dominates(correct in proptest::collection::vec(0u32..=10, 1..60), k in 1usize..20) {
        let records: Vec<_> = correct
            .iter()
            .enumerate()
            .map(|(i, c)| record(&format!("s{:02}", (i * 37) % 61), *c as f64 / 10.0))
            .collect();
        let ranking = rank(&records).unwrap();
        let cond = Condition::new(ConditionKind::QZLoRATopK, k, Style::Realistic).unwrap();
        let set = select_top_k("t", &ranking, cond, "q").unwrap();
        prop_assert_eq!(set.image_ids.len(), k.min(records.len()));
        let chosen: HashSet<&str> = set.image_ids.iter().map(String::as_str).collect();
        for s in &records {
            if chosen.contains(s.subject_id.as_str()) {
                continue;
            }
            for c in records.iter().filter(|r| chosen.contains(r.subject_id.as_str())) {
                prop_assert!(
                    c.accuracy > s.accuracy || (c.accuracy == s.accuracy && c.subject_id < s.subject_id)
                );
            }
        }
    }
}

#[test]
fn random_k_is_uniform() {
    let (n, k, trials) = (20usize, 5usize, 10_000u64);
    let corpus = candidates(n);
    let cond = Condition::new(ConditionKind::LoRARandomK, k, Style::Realistic).unwrap();
    let mut hits = vec![0u64; n];
    for seed in 0..trials {
        let set = select_random_k("t", &corpus, cond, seed).unwrap();
        let distinct: HashSet<_> = set.image_ids.iter().collect();
        assert_eq!(distinct.len(), k);
        for id in &set.image_ids {
            hits[id[2..].parse::<usize>().unwrap()] += 1;
        }
    }
    let p = k as f64 / n as f64;
    let expected = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        assert!((h as f64 - expected).abs() < 5.0 * sd, "index {i}: {h} vs {expected}");
    }
    // chi-square, 19 dof; 0.999 quantile is 43.82
    let chi: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    assert!(chi < 43.82 * (1.0 - p), "chi-square {chi}");
}

#[test]
fn quiz_ids_do_not_collide() {
    let mut seen = HashSet::new();
    for i in 0..10_000u32 {
        let q = Question {
            stem: format!("What shape is feature {i}?"),
            options: vec!["round".into(), "square".into(), format!("option {}", i % 7), "oval".into()],
            correct_index: (i % 4) as usize,
            focus_attribute: FocusAttribute::Shape,
        };
        let quiz = Quiz::new(&format!("topic-{}", i % 13), vec![q], "gen", vec![], Utc.timestamp_opt(0, 0).unwrap()).unwrap();
        assert!(seen.insert(quiz.quiz_id), "collision at {i}");
    }
}

#[test]
fn quiz_id_ignores_created_at_and_whitespace() {
    let q = |stem: &str| Question {
        stem: stem.into(),
        options: vec!["a".into(), "b".into()],
        correct_index: 0,
        focus_attribute: FocusAttribute::Color,
    };
    let a = Quiz::new("t", vec![q("Which  colour?")], "g", vec![], Utc.timestamp_opt(0, 0).unwrap()).unwrap();
    let b = Quiz::new("t", vec![q("Which colour?")], "g", vec![], Utc.timestamp_opt(99, 0).unwrap()).unwrap();
    assert_eq!(a.quiz_id, b.quiz_id);
}
