//! Extraction of the chosen option letter from free-form VLM replies.
//!
//! Rules, tried in order; the first rule that finds a letter decides:
//!
//! 1. a keyword (`answer`, `option`, `choice`, optionally followed by `is`,
//!    `would be`, `should be`, `:` or `-`) directly followed by a standalone
//!    letter A–F, optionally bracketed;
//! 2. the first bracketed letter, `(b)` or `[B]`;
//! 3. a reply that opens with a letter followed by punctuation or nothing
//!    (`B`, `b)`, `C. because ...`);
//! 4. the first standalone uppercase letter A–F, skipping the article in
//!    `A word`.
//!
//! A letter beyond the question's option count, or no letter at all, is
//! `Unparseable`.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParsedAnswer {
    Choice(usize),
    Unparseable,
}

impl ParsedAnswer {
    pub fn index(self) -> Option<usize> {
        match self {
            ParsedAnswer::Choice(i) => Some(i),
            ParsedAnswer::Unparseable => None,
        }
    }
}

struct Rules {
    keyword: Regex,
    bracketed: Regex,
    leading: Regex,
    standalone: Regex,
}

fn rules() -> &'static Rules {
    static R: OnceLock<Rules> = OnceLock::new();
    R.get_or_init(|| Rules {
        keyword: Regex::new(
            r"(?i)\b(?:answer|option|choice)\b(?:\s+(?:is|would\s+be|should\s+be))?\s*[:\-=]?\s*[(\[]?\s*([a-f])\s*[)\]]?(?:[^a-z0-9]|$)",
        )
        .expect("keyword rule"),
        bracketed: Regex::new(r"[(\[]\s*([A-Fa-f])\s*[)\]]").expect("bracket rule"),
        leading: Regex::new(r"^[\s*_`'\x22]*([A-Fa-f])(?:\s*$|\s*[).:,\]]|\s+[-\u{2013}\u{2014}])").expect("leading rule"),
        standalone: Regex::new(r"\b([A-F])\b").expect("standalone rule"),
    })
}

fn letter_index(c: char) -> usize {
    (c.to_ascii_uppercase() as u8 - b'A') as usize
}

/// `a word` / `A word`: the indefinite article rather than option A.
fn is_article(raw: &str, m: regex::Match<'_>) -> bool {
    let rest = &raw[m.end()..];
    m.as_str().eq_ignore_ascii_case("a")
        && rest.starts_with(' ')
        && rest[1..].chars().next().is_some_and(|ch| ch.is_lowercase())
}

fn find_letter(raw: &str) -> Option<char> {
    let r = rules();
    let first = |re: &Regex| {
        re.captures_iter(raw)
            .filter_map(|c| c.get(1))
            .find(|m| !is_article(raw, *m))
            .and_then(|m| m.as_str().chars().next())
    };
    first(&r.keyword)
        .or_else(|| first(&r.bracketed))
        .or_else(|| first(&r.leading))
        .or_else(|| first(&r.standalone))
}

/// The option a reply chose, given how many options the question had.
pub fn parse_answer(raw_text: &str, option_count: usize) -> ParsedAnswer {
    match find_letter(raw_text) {
        Some(c) if letter_index(c) < option_count => ParsedAnswer::Choice(letter_index(c)),
        _ => ParsedAnswer::Unparseable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(parse_answer("Answer: B.", 4), ParsedAnswer::Choice(1));
        assert_eq!(parse_answer("The best choice is (c) because...", 4), ParsedAnswer::Choice(2));
        assert_eq!(parse_answer("E", 4), ParsedAnswer::Unparseable);
    }

    #[test]
    fn article_is_not_an_option() {
        assert_eq!(parse_answer("A crescent shape, so C.", 4), ParsedAnswer::Choice(2));
        assert_eq!(parse_answer("I cannot tell from a blurry photo.", 4), ParsedAnswer::Unparseable);
        assert_eq!(
            parse_answer("The answer is a crescent-shaped pastry, option D.", 4),
            ParsedAnswer::Choice(3)
        );
    }

    #[test]
    fn out_of_range_keyword_answer() {
        assert_eq!(parse_answer("Answer: E", 4), ParsedAnswer::Unparseable);
        assert_eq!(parse_answer("Answer: E", 5), ParsedAnswer::Choice(4));
    }
}
