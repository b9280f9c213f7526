//! LLM-as-judge scoring of coherence, fluency and readability.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::{substitute, TemplateEntry, EXAMPLES, TEXT};
use super::GenContext;
use crate::backend::{BackendError, CallPurpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityScores {
    pub coherence: u8,
    pub fluency: u8,
    pub readability: u8,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("could not find three 1-5 scores in judge output")]
    Parse { raw: String },
}

fn score_pattern(name: &str) -> Regex {
    // "Coherence: 5", "coherence (4/5)", "**Fluency** - 3 out of 5"
    Regex::new(&format!(
        r"(?i)\b{name}\b[^0-9\n]{{0,40}}?\b([1-5])(?:\.0)?(?:[^0-9.]|\.(?:[^0-9]|$)|$)"
    ))
    .unwrap()
}

fn patterns() -> &'static [Regex; 3] {
    static PATTERNS: OnceLock<[Regex; 3]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            score_pattern("coherence"),
            score_pattern("fluency"),
            score_pattern("readability"),
        ]
    })
}

/// Extracts the three scores; the first match of each criterion wins.
pub fn parse_scores(raw: &str) -> Option<QualityScores> {
    let [c, f, r] = patterns();
    let grab = |re: &Regex| {
        re.captures(raw)
            .and_then(|cap| cap.get(1))
            .and_then(|m| m.as_str().parse::<u8>().ok())
    };
    Some(QualityScores {
        coherence: grab(c)?,
        fluency: grab(f)?,
        readability: grab(r)?,
    })
}

/// Asks the judge to rate `text` one-shot: `example` fills the
/// `{examples}` slot of the evaluation template.
pub fn llm_quality_eval(
    text: &str,
    judge: &GenContext<'_>,
    template: &TemplateEntry,
    example: &str,
) -> Result<QualityScores, QualityError> {
    let prompt = substitute(&template.body, &[(EXAMPLES, example), (TEXT, text)]);
    let raw = judge.call(prompt, &[], 0, CallPurpose::Judge)?.text;
    parse_scores(&raw).ok_or(QualityError::Parse { raw })
}
