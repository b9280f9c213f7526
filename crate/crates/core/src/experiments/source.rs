//! Keyword inputs: fixed set files, word pools and CommonGen rows.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ExperimentError;
use crate::constraint::{normalize_and_tokenize, MatchPolicy};
use crate::data::DataRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// JSONL of `{"keywords": [...]}`; sets are used as given.
    FileSets,
    /// One word per line; each set is drawn without replacement.
    SampledPool,
    /// CommonGen JSONL; the union of all concepts becomes the pool.
    CommongenFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordSource {
    pub kind: SourceKind,
    pub path: DataRef,
    /// Overrides the run seed for drawing sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for KeywordSource {
    fn default() -> Self {
        Self::pool(DataRef::builtin("concepts"))
    }
}

impl KeywordSource {
    pub fn pool(path: DataRef) -> Self {
        Self {
            kind: SourceKind::SampledPool,
            path,
            seed: None,
        }
    }

    pub(crate) fn resolve(&mut self, base: &Path) {
        self.path = self.path.resolve(base);
    }

    pub fn load(&self, policy: &MatchPolicy) -> Result<LoadedSource, ExperimentError> {
        let text = self.path.read().map_err(ExperimentError::Config)?;
        let bad = |e: String| ExperimentError::Config(format!("{}: {e}", self.path));
        match self.kind {
            SourceKind::FileSets => Ok(LoadedSource::Sets(parse_keyword_sets(&text).map_err(bad)?)),
            SourceKind::SampledPool => Ok(LoadedSource::Pool(dedup(parse_pool(&text), policy))),
            SourceKind::CommongenFile => {
                let rows = parse_commongen(&text).map_err(bad)?;
                Ok(LoadedSource::Pool(dedup(rows.into_iter().flatten().collect(), policy)))
            }
        }
    }
}

/// Keeps the first occurrence of each keyword under `policy`.
fn dedup(words: Vec<String>, policy: &MatchPolicy) -> Vec<String> {
    let mut seen = HashSet::new();
    words
        .into_iter()
        .filter(|w| {
            let key = normalize_and_tokenize(w, policy).tokens;
            !key.is_empty() && seen.insert(key)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadedSource {
    Sets(Vec<Vec<String>>),
    Pool(Vec<String>),
}

impl LoadedSource {
    /// `count` keyword sets of size `n`. Pools are sampled without
    /// replacement within a set, in random order; fixed sets are taken in
    /// file order.
    pub fn draw<R: Rng>(&self, n: usize, count: usize, rng: &mut R) -> Result<Vec<Vec<String>>, ExperimentError> {
        match self {
            LoadedSource::Pool(pool) => {
                if n > pool.len() {
                    return Err(ExperimentError::Config(format!(
                        "cannot draw {n} distinct keywords from a pool of {}",
                        pool.len()
                    )));
                }
                Ok((0..count)
                    .map(|_| {
                        index::sample(rng, pool.len(), n)
                            .into_iter()
                            .map(|i| pool[i].clone())
                            .collect()
                    })
                    .collect())
            }
            LoadedSource::Sets(sets) => {
                let matching: Vec<Vec<String>> = sets.iter().filter(|s| s.len() == n).take(count).cloned().collect();
                if matching.len() < count {
                    return Err(ExperimentError::Config(format!(
                        "need {count} keyword sets of size {n}, the file has {}",
                        matching.len()
                    )));
                }
                Ok(matching)
            }
        }
    }
}

fn non_comment_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?.iter().map(|x| x.as_str().map(str::to_string)).collect()
}

/// Keyword-set JSONL: `{"keywords": [...]}` per line (a bare array also works).
pub fn parse_keyword_sets(text: &str) -> Result<Vec<Vec<String>>, String> {
    non_comment_lines(text)
        .map(|(line, l)| {
            let v: Value = serde_json::from_str(l).map_err(|e| format!("line {line}: {e}"))?;
            let list = v.get("keywords").unwrap_or(&v);
            string_list(list).ok_or_else(|| format!("line {line}: expected {{\"keywords\": [strings]}}"))
        })
        .collect()
}

/// One word (or phrase) per line; blank lines and `#` comments skipped.
pub fn parse_pool(text: &str) -> Vec<String> {
    non_comment_lines(text).map(|(_, l)| l.to_string()).collect()
}

/// CommonGen JSONL rows; `concepts` may be a list or a `#`-joined string.
/// Reference sentences are ignored.
pub fn parse_commongen(text: &str) -> Result<Vec<Vec<String>>, String> {
    non_comment_lines(text)
        .map(|(line, l)| {
            let v: Value = serde_json::from_str(l).map_err(|e| format!("line {line}: {e}"))?;
            let concepts = v.get("concepts").or_else(|| v.get("concept_set"));
            match concepts {
                Some(Value::String(s)) => Ok(s
                    .split('#')
                    .map(|c| c.trim().to_string())
                    .filter(|c| !c.is_empty())
                    .collect()),
                Some(list) => string_list(list).ok_or_else(|| format!("line {line}: concepts must be strings")),
                None => Err(format!("line {line}: missing \"concepts\"")),
            }
        })
        .collect()
}

/// Client rows `{"attributes": {"Name": "...", ...}}`; returns the attribute
/// values of each row in file order.
pub fn parse_client_rows(text: &str) -> Result<Vec<Vec<String>>, String> {
    non_comment_lines(text)
        .map(|(line, l)| {
            let v: Value = serde_json::from_str(l).map_err(|e| format!("line {line}: {e}"))?;
            let attrs = v
                .get("attributes")
                .and_then(Value::as_object)
                .ok_or_else(|| format!("line {line}: missing \"attributes\" object"))?;
            Ok(attrs
                .values()
                .map(|x| match x {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect())
        })
        .collect()
}
