//! Keyword constraints: tokenization, matching and compound-split detection.
//!
//! Text is split into word tokens (letters, digits, combining marks and
//! apostrophes); everything else separates. A keyword is satisfied when its
//! normalized parts occur as a contiguous run of tokens in the text.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

/// Suffixes removed by the optional morphological matcher, longest first.
const SUFFIXES: &[&str] = &["ing", "es", "ed", "ly", "s"];
/// A stripped stem must keep at least this many characters.
const MIN_STEM_CHARS: usize = 3;
/// Both halves of a compound split must have at least this many characters.
const MIN_COMPOUND_PART_CHARS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConstraintError {
    #[error("keyword {0:?} contains no word characters")]
    EmptyKeyword(String),
    #[error("duplicate keyword {0:?} after normalization")]
    DuplicateKeyword(String),
    #[error("failed to read lexicon {path}: {message}")]
    Lexicon { path: String, message: String },
}

/// How text and keywords are normalized before matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchPolicy {
    pub case_fold: bool,
    /// Canonical composition (NFC) of every token.
    pub unicode_normalize: bool,
    /// Accept simple inflections ("leaps" for "leap"). Off means exact tokens.
    pub morphological: bool,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        Self {
            case_fold: true,
            unicode_normalize: true,
            morphological: false,
        }
    }
}

impl MatchPolicy {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn morphological() -> Self {
        Self {
            morphological: true,
            ..Self::default()
        }
    }

    fn normalize_token(&self, raw: &str) -> String {
        let mut token: String = raw.chars().map(|c| if c == '\u{2019}' { '\'' } else { c }).collect();
        if self.unicode_normalize {
            token = token.nfc().collect();
        }
        if self.case_fold {
            token = token.to_lowercase();
        }
        token
    }
}

/// Character span `[start, end)` in units of `char`s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub raw: String,
    pub tokens: Vec<String>,
    pub spans: Vec<Span>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains_token(&self, token: &str) -> bool {
        self.tokens.iter().any(|t| t == token)
    }
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

fn is_word_char(c: char, in_word: bool) -> bool {
    c.is_alphanumeric() || is_apostrophe(c) || (in_word && is_combining_mark(c))
}

/// Splits `raw` into word tokens. Apostrophes at the edge of a run are not
/// part of the token, so quoted words ('like this') match their bare form.
pub fn normalize_and_tokenize(raw: &str, policy: &MatchPolicy) -> TokenizedText {
    let chars: Vec<char> = raw.chars().collect();
    let mut tokens = Vec::new();
    let mut spans = Vec::new();

    let mut i = 0;
    while i < chars.len() {
        if !is_word_char(chars[i], false) {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < chars.len() && is_word_char(chars[i], i > run_start) {
            i += 1;
        }
        let mut start = run_start;
        let mut end = i;
        while start < end && is_apostrophe(chars[start]) {
            start += 1;
        }
        while end > start && is_apostrophe(chars[end - 1]) {
            end -= 1;
        }
        if start == end {
            continue;
        }
        let slice: String = chars[start..end].iter().collect();
        tokens.push(policy.normalize_token(&slice));
        spans.push(Span { start, end });
    }

    TokenizedText {
        raw: raw.to_string(),
        tokens,
        spans,
    }
}

/// Candidate forms of a token under the morphological policy: the token
/// itself plus every single-suffix strip that leaves a long enough stem.
fn stems(token: &str) -> Vec<&str> {
    let mut forms = vec![token];
    for suffix in SUFFIXES {
        if let Some(stem) = token.strip_suffix(suffix) {
            if stem.chars().count() >= MIN_STEM_CHARS {
                forms.push(stem);
            }
        }
    }
    forms
}

fn token_matches(text_token: &str, part: &str, policy: &MatchPolicy) -> bool {
    if text_token == part {
        return true;
    }
    if !policy.morphological {
        return false;
    }
    let a = stems(text_token);
    let b = stems(part);
    a.iter().any(|x| b.contains(x))
}

/// A single constraint. `parts` holds the normalized word tokens of the
/// surface form; multi-word keywords have more than one part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyword {
    pub surface: String,
    pub parts: Vec<String>,
}

impl Keyword {
    pub fn new(surface: &str, policy: &MatchPolicy) -> Result<Self, ConstraintError> {
        let trimmed = surface.trim();
        let parts = normalize_and_tokenize(trimmed, policy).tokens;
        if parts.is_empty() {
            return Err(ConstraintError::EmptyKeyword(surface.to_string()));
        }
        Ok(Self {
            surface: trimmed.to_string(),
            parts,
        })
    }

    pub fn is_single_token(&self) -> bool {
        self.parts.len() == 1
    }
}

/// Ordered keyword constraints; order is the position in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    keywords: Vec<Keyword>,
    policy: MatchPolicy,
}

impl KeywordSet {
    pub fn new<S: AsRef<str>>(surfaces: &[S], policy: MatchPolicy) -> Result<Self, ConstraintError> {
        let mut keywords = Vec::with_capacity(surfaces.len());
        let mut seen = HashSet::new();
        for s in surfaces {
            let kw = Keyword::new(s.as_ref(), &policy)?;
            if !seen.insert(kw.parts.clone()) {
                return Err(ConstraintError::DuplicateKeyword(kw.surface));
            }
            keywords.push(kw);
        }
        Ok(Self { keywords, policy })
    }

    pub fn empty(policy: MatchPolicy) -> Self {
        Self {
            keywords: Vec::new(),
            policy,
        }
    }

    pub fn keywords(&self) -> &[Keyword] {
        &self.keywords
    }

    pub fn policy(&self) -> &MatchPolicy {
        &self.policy
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.keywords.iter().map(|k| k.surface.as_str()).collect()
    }

    pub fn tokenize(&self, raw: &str) -> TokenizedText {
        normalize_and_tokenize(raw, &self.policy)
    }

    /// Keeps the keywords for which `keep` returns true, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&Keyword) -> bool) -> Self {
        Self {
            keywords: self.keywords.iter().filter(|k| keep(k)).cloned().collect(),
            policy: self.policy,
        }
    }

    /// Satisfaction flag for each keyword, in set order.
    pub fn satisfied_flags(&self, text: &TokenizedText) -> Vec<bool> {
        self.keywords
            .iter()
            .map(|k| contains_keyword(text, k, &self.policy))
            .collect()
    }
}

pub fn contains_keyword(text: &TokenizedText, kw: &Keyword, policy: &MatchPolicy) -> bool {
    let n = kw.parts.len();
    if n == 0 || n > text.tokens.len() {
        return false;
    }
    text.tokens
        .windows(n)
        .any(|window| window.iter().zip(&kw.parts).all(|(t, p)| token_matches(t, p, policy)))
}

/// The keywords of `set` that `text` does not contain, in their original order.
pub fn missing_keywords(set: &KeywordSet, text: &TokenizedText) -> KeywordSet {
    let policy = *set.policy();
    set.filter(|k| !contains_keyword(text, k, &policy))
}

/// Word list used to validate compound constituents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    words: HashSet<String>,
}

impl Lexicon {
    pub fn from_words<I, S>(words: I, policy: &MatchPolicy) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words = words
            .into_iter()
            .map(|w| policy.normalize_token(w.as_ref().trim()))
            .filter(|w| !w.is_empty())
            .collect();
        Self { words }
    }

    /// Parses a lexicon file: one word per line, blank lines ignored.
    pub fn parse(contents: &str, policy: &MatchPolicy) -> Self {
        Self::from_words(contents.lines(), policy)
    }

    pub fn load(path: &Path, policy: &MatchPolicy) -> Result<Self, ConstraintError> {
        let contents = fs::read_to_string(path).map_err(|e| ConstraintError::Lexicon {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::parse(&contents, policy))
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.words.contains(normalized)
    }
}

/// Detects a keyword that the text renders as two separate words, such as
/// "jelly fish" for "jellyfish". Split points are tried left to right; the
/// first split whose halves both have at least three characters, are in the
/// lexicon (when it is non-empty) and occur as tokens of `text` is returned
/// as slices of the keyword's surface form.
pub fn detect_compound_split(
    kw: &Keyword,
    text: &TokenizedText,
    lexicon: &Lexicon,
    policy: &MatchPolicy,
) -> Option<(String, String)> {
    if !kw.is_single_token() || contains_keyword(text, kw, policy) {
        return None;
    }
    let chars: Vec<char> = kw.surface.chars().collect();
    if chars.len() < 2 * MIN_COMPOUND_PART_CHARS {
        return None;
    }
    for split in MIN_COMPOUND_PART_CHARS..=chars.len() - MIN_COMPOUND_PART_CHARS {
        let left: String = chars[..split].iter().collect();
        let right: String = chars[split..].iter().collect();
        let left_norm = policy.normalize_token(&left);
        let right_norm = policy.normalize_token(&right);
        if !lexicon.is_empty() && !(lexicon.contains(&left_norm) && lexicon.contains(&right_norm)) {
            continue;
        }
        if text.contains_token(&left_norm) && text.contains_token(&right_norm) {
            return Some((left, right));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(s: &str) -> TokenizedText {
        normalize_and_tokenize(s, &MatchPolicy::default())
    }

    fn kw(s: &str) -> Keyword {
        Keyword::new(s, &MatchPolicy::default()).unwrap()
    }

    #[test]
    fn tokenizes_case_folded_words() {
        assert_eq!(tok("The CAT sat.").tokens, vec!["the", "cat", "sat"]);
        assert!(tok("").tokens.is_empty());
        assert_eq!(tok("don't stop").tokens, vec!["don't", "stop"]);
    }

    #[test]
    fn edge_apostrophes_are_trimmed() {
        let t = tok("'quoted' ''' dogs' bone");
        assert_eq!(t.tokens, vec!["quoted", "dogs", "bone"]);
        assert_eq!(t.spans[0], Span { start: 1, end: 7 });
    }

    #[test]
    fn curly_apostrophe_is_normalized() {
        assert_eq!(tok("don\u{2019}t").tokens, vec!["don't"]);
    }

    #[test]
    fn decomposed_accents_are_composed() {
        let t = tok("cafe\u{301} au lait");
        assert_eq!(t.tokens, vec!["caf\u{e9}", "au", "lait"]);
        assert!(contains_keyword(&t, &kw("caf\u{e9}"), &MatchPolicy::default()));
    }

    #[test]
    fn whole_token_matching() {
        let p = MatchPolicy::default();
        assert!(contains_keyword(&tok("the cat sat"), &kw("cat"), &p));
        assert!(!contains_keyword(&tok("the cats sat"), &kw("cat"), &p));
        assert!(!contains_keyword(
            &tok("the court built beside his house"),
            &kw("courthouse"),
            &p
        ));
    }

    #[test]
    fn multi_word_keywords_match_contiguously() {
        let p = MatchPolicy::default();
        let k = kw("ice cream");
        assert_eq!(k.parts, vec!["ice", "cream"]);
        assert!(contains_keyword(&tok("I like ice-cream a lot"), &k, &p));
        assert!(!contains_keyword(&tok("cream and ice"), &k, &p));
    }

    #[test]
    fn morphological_policy_accepts_inflections() {
        let p = MatchPolicy::morphological();
        let t = normalize_and_tokenize("the cats leaped over horses", &p);
        for word in ["cat", "leap", "horse"] {
            assert!(contains_keyword(&t, &Keyword::new(word, &p).unwrap(), &p), "{word}");
        }
        let exact = MatchPolicy::default();
        assert!(!contains_keyword(&t, &Keyword::new("cat", &exact).unwrap(), &exact));
        // stems shorter than three characters are not produced
        let t = normalize_and_tokenize("sing", &p);
        assert!(!contains_keyword(&t, &Keyword::new("s", &p).unwrap(), &p));
    }

    #[test]
    fn missing_keywords_preserves_order() {
        let p = MatchPolicy::default();
        let set = KeywordSet::new(&["cat", "leaves", "sunny", "leaps", "energy"], p).unwrap();
        let missing = missing_keywords(&set, &tok("Sunny cat leaps."));
        assert_eq!(missing.surfaces(), vec!["leaves", "energy"]);

        let set = KeywordSet::new(&["a", "b", "c"], p).unwrap();
        assert_eq!(missing_keywords(&set, &tok("c and a")).surfaces(), vec!["b"]);
        assert!(missing_keywords(&KeywordSet::empty(p), &tok("x")).is_empty());
    }

    #[test]
    fn keyword_set_rejects_duplicates_and_empties() {
        let p = MatchPolicy::default();
        assert_eq!(
            KeywordSet::new(&["Cat", "cat "], p).unwrap_err(),
            ConstraintError::DuplicateKeyword("cat".into())
        );
        assert!(matches!(
            KeywordSet::new(&["  ", "cat"], p),
            Err(ConstraintError::EmptyKeyword(_))
        ));
    }

    #[test]
    fn compound_splits() {
        let p = MatchPolicy::default();
        let empty = Lexicon::default();
        assert_eq!(
            detect_compound_split(&kw("jellyfish"), &tok("a jelly fish swims"), &empty, &p),
            Some(("jelly".into(), "fish".into()))
        );
        assert_eq!(
            detect_compound_split(&kw("anymore"), &tok("any more time now"), &empty, &p),
            Some(("any".into(), "more".into()))
        );
        assert_eq!(
            detect_compound_split(&kw("courthouse"), &tok("the court built beside his house"), &empty, &p),
            Some(("court".into(), "house".into()))
        );
        assert_eq!(detect_compound_split(&kw("cat"), &tok("ca t cat"), &empty, &p), None);
        // intact keyword is not a split
        assert_eq!(
            detect_compound_split(&kw("jellyfish"), &tok("jelly fish jellyfish"), &empty, &p),
            None
        );
    }

    #[test]
    fn compound_split_respects_lexicon() {
        let p = MatchPolicy::default();
        let lex = Lexicon::parse("sun\nflower\n\n", &p);
        assert_eq!(lex.len(), 2);
        let text = tok("sunf lower sun flower");
        assert_eq!(
            detect_compound_split(&kw("Sunflower"), &text, &lex, &p),
            Some(("Sun".into(), "flower".into()))
        );
        let lex = Lexicon::parse("moon\n", &p);
        assert_eq!(detect_compound_split(&kw("sunflower"), &text, &lex, &p), None);
    }
}
