//! Tolerant parser for the question-block payload returned by the text model.
//!
//! ```text
//! Question 1: Which shape ...?
//! A) crescent
//! B) square
//! Answer: A
//! Attribute: shape
//! ```
//!
//! Accepted variations: `Q1.` / `1.` / `**Question 1:**` headers, `A.` /
//! `(A)` / `a)` option markers, `Correct answer: (b)`, a missing attribute
//! line (tagged `other`), blank lines and markdown emphasis anywhere.

use std::sync::OnceLock;

use regex::Regex;

use super::{FocusAttribute, Question};

/// One question block: parsed, or the reason it could not be.
pub type ParsedBlock = Result<Question, String>;

struct Grammar {
    header: Regex,
    option: Regex,
    answer: Regex,
    attribute: Regex,
}

fn grammar() -> &'static Grammar {
    static G: OnceLock<Grammar> = OnceLock::new();
    G.get_or_init(|| Grammar {
        header: Regex::new(r"(?i)^(?:q(?:uestion)?\s*\d*\s*[:.)\-]|\d+\s*[.):])\s*(.*)$").expect("header regex"),
        option: Regex::new(r"^\(?([A-Fa-f])\s*[).:\]]\s*(.*)$").expect("option regex"),
        answer: Regex::new(r"(?i)^(?:correct\s+)?(?:answer|correct)\s*[:\-]\s*\(?([A-F])\b").expect("answer regex"),
        attribute: Regex::new(r"(?i)^(?:attribute|focus(?:\s+attribute)?)\s*[:\-]\s*([A-Za-z]+)").expect("attribute regex"),
    })
}

#[derive(Default)]
struct Draft {
    stem: String,
    options: Vec<(char, String)>,
    answer: Option<char>,
    attribute: Option<FocusAttribute>,
}

impl Draft {
    fn finish(self) -> ParsedBlock {
        if self.stem.trim().is_empty() {
            return Err("missing question text".into());
        }
        let answer = self.answer.ok_or("missing answer line")?;
        for (i, (letter, _)) in self.options.iter().enumerate() {
            if *letter != (b'A' + i as u8) as char {
                return Err(format!("option letters out of sequence at {letter}"));
            }
        }
        let correct_index = (answer as u8 - b'A') as usize;
        Ok(Question {
            stem: self.stem.trim().to_string(),
            options: self.options.into_iter().map(|(_, t)| t.trim().to_string()).collect(),
            correct_index,
            focus_attribute: self.attribute.unwrap_or(FocusAttribute::Other),
        })
    }
}

/// Splits the payload into question blocks and parses each.
///
/// Structural validity (option count, duplicates, answer range) is left to
/// `validate_question`; this only extracts fields.
pub fn parse_payload(text: &str) -> Vec<ParsedBlock> {
    let g = grammar();
    let mut blocks = Vec::new();
    let mut current: Option<Draft> = None;
    for raw in text.lines() {
        let line = raw.replace("**", "");
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = g.answer.captures(line) {
            if let Some(d) = current.as_mut() {
                d.answer = c[1].chars().next().map(|ch| ch.to_ascii_uppercase());
            }
            continue;
        }
        if let Some(c) = g.attribute.captures(line) {
            if let Some(d) = current.as_mut() {
                d.attribute = Some(FocusAttribute::from_tag(&c[1]));
            }
            continue;
        }
        if let Some(c) = g.option.captures(line) {
            if let Some(d) = current.as_mut() {
                let letter = c[1].chars().next().expect("one letter").to_ascii_uppercase();
                d.options.push((letter, c[2].to_string()));
                continue;
            }
        }
        if let Some(c) = g.header.captures(line) {
            if let Some(d) = current.take() {
                blocks.push(d.finish());
            }
            current = Some(Draft {
                stem: c[1].to_string(),
                ..Draft::default()
            });
            continue;
        }
        // continuation of a stem that wrapped before any option
        if let Some(d) = current.as_mut() {
            if d.options.is_empty() {
                d.stem.push(' ');
                d.stem.push_str(line);
            }
        }
    }
    if let Some(d) = current {
        blocks.push(d.finish());
    }
    blocks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_block() {
        let text = "Question 1: What shape is it?\nA) Crescent\nB) Square\nC) Round\nD) Star\nAnswer: A\nAttribute: shape\n";
        let blocks = parse_payload(text);
        assert_eq!(blocks.len(), 1);
        let q = blocks[0].as_ref().unwrap();
        assert_eq!(q.stem, "What shape is it?");
        assert_eq!(q.options, vec!["Crescent", "Square", "Round", "Star"]);
        assert_eq!(q.correct_index, 0);
        assert_eq!(q.focus_attribute, FocusAttribute::Shape);
    }

    #[test]
    fn tolerant_variants() {
        let text = "**Q1.** What colour are the wings?\n(a) Blue\n(b) Red\n(c) Green\nCorrect answer: (c)\nFocus: colour\n\n\
                    2. Which\ntexture?\nA. Flaky\nB. Smooth\nAnswer - B\n";
        let blocks = parse_payload(text);
        assert_eq!(blocks.len(), 2);
        let q1 = blocks[0].as_ref().unwrap();
        assert_eq!(q1.correct_index, 2);
        assert_eq!(q1.focus_attribute, FocusAttribute::Color);
        let q2 = blocks[1].as_ref().unwrap();
        assert_eq!(q2.stem, "Which texture?");
        assert_eq!(q2.correct_index, 1);
        assert_eq!(q2.focus_attribute, FocusAttribute::Other);
    }

    #[test]
    fn missing_answer_is_block_error() {
        let blocks = parse_payload("Question 1: x?\nA) a\nB) b\n");
        assert!(blocks[0].is_err());
    }

    #[test]
    fn out_of_range_answer_is_left_to_validation() {
        let q = parse_payload("Question 1: x?\nA) a\nB) b\nAnswer: D\n").remove(0).unwrap();
        assert_eq!(q.correct_index, 3);
    }
}
