//! Turning free-text model output into task predictions.
//!
//! Rating extraction collects every score matched by three pattern families
//! (`[score]/5`, `[score] out of 5`, `a rating of [score]`) and accepts the
//! answer only when all matches agree and the score lies in [0.5, 5.0].
//! Pairwise extraction looks for a single standalone `A` or `B` token.
//! Both extractors are total: any input maps to a `Prediction`.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::sampler::Side;

pub const SCORE_MIN: f64 = 0.5;
pub const SCORE_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Score(f64),
    Choice(Side),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Prediction {
    Readable(Answer),
    Unreadable,
    /// The backend never produced text (distinct from unparseable text).
    GenerationFailed,
}

impl Prediction {
    pub fn is_readable(&self) -> bool {
        matches!(self, Prediction::Readable(_))
    }

    pub fn score(&self) -> Option<f64> {
        match self {
            Prediction::Readable(Answer::Score(s)) => Some(*s),
            _ => None,
        }
    }

    pub fn side(&self) -> Option<Side> {
        match self {
            Prediction::Readable(Answer::Choice(s)) => Some(*s),
            _ => None,
        }
    }
}

const SLASH_PATTERN: &str = r"(\d+(?:\.\d+)?)\s*/\s*(\d+(?:\.\d+)?)";
const OUT_OF_PATTERN: &str = r"(?i)(\d+(?:\.\d+)?)\s+out\s+of\s+(\d+(?:\.\d+)?)";
const RATING_OF_PATTERN: &str = r"(?i)\ba\s+(?:rating|score)\s+of\s+(\d+(?:\.\d+)?)";
const CHOICE_PATTERN: &str = r"\b([AB])\b";

static SLASH: Lazy<Regex> = Lazy::new(|| Regex::new(SLASH_PATTERN).expect("valid regex"));
static OUT_OF: Lazy<Regex> = Lazy::new(|| Regex::new(OUT_OF_PATTERN).expect("valid regex"));
static RATING_OF: Lazy<Regex> = Lazy::new(|| Regex::new(RATING_OF_PATTERN).expect("valid regex"));
static CHOICE: Lazy<Regex> = Lazy::new(|| Regex::new(CHOICE_PATTERN).expect("valid regex"));

/// The exact pattern set, for documentation and the `parse --show-patterns`
/// command.
pub fn patterns() -> Vec<(&'static str, &'static str)> {
    vec![
        ("rating: [score]/5 (denominator must be 5)", SLASH_PATTERN),
        ("rating: [score] out of 5 (denominator must be 5)", OUT_OF_PATTERN),
        ("rating: a rating|score of [score]", RATING_OF_PATTERN),
        ("choice: standalone A or B", CHOICE_PATTERN),
    ]
}

/// Parses a score token with at most one decimal digit.
fn parse_score(token: &str) -> Option<f64> {
    match token.split_once('.') {
        Some((_, frac)) if frac.len() > 1 => None,
        _ => token.parse().ok(),
    }
}

fn preceded_by_number(text: &str, start: usize) -> bool {
    text[..start].chars().next_back().is_some_and(|c| c.is_ascii_digit() || c == '.')
}

fn is_five(token: &str) -> bool {
    token == "5" || token == "5.0"
}

/// Every score found by the three pattern families, in family order.
pub fn rating_matches(text: &str) -> Vec<f64> {
    let mut scores = Vec::new();
    for re in [&*SLASH, &*OUT_OF] {
        for caps in re.captures_iter(text) {
            let num = caps.get(1).expect("group 1");
            if preceded_by_number(text, num.start()) || !is_five(&caps[2]) {
                continue;
            }
            if let Some(s) = parse_score(num.as_str()) {
                scores.push(s);
            }
        }
    }
    for caps in RATING_OF.captures_iter(text) {
        if let Some(s) = parse_score(&caps[1]) {
            scores.push(s);
        }
    }
    scores
}

pub fn extract_rating(text: &str) -> Prediction {
    let scores = rating_matches(text);
    let Some(&first) = scores.first() else {
        return Prediction::Unreadable;
    };
    if scores.iter().any(|&s| s != first) {
        return Prediction::Unreadable;
    }
    if !(SCORE_MIN..=SCORE_MAX).contains(&first) {
        return Prediction::Unreadable;
    }
    Prediction::Readable(Answer::Score(first))
}

pub fn extract_choice(text: &str) -> Prediction {
    let mut found_a = false;
    let mut found_b = false;
    for caps in CHOICE.captures_iter(text) {
        match &caps[1] {
            "A" => found_a = true,
            _ => found_b = true,
        }
    }
    match (found_a, found_b) {
        (true, false) => Prediction::Readable(Answer::Choice(Side::A)),
        (false, true) => Prediction::Readable(Answer::Choice(Side::B)),
        _ => Prediction::Unreadable,
    }
}

/// Preference answers go through a second model call; only that call's
/// output is parsed.
pub fn extract_preference(_first_output: &str, followup_output: &str) -> Prediction {
    extract_choice(followup_output)
}
