//! Prompt templates with `{name}` placeholders.
//!
//! A template file is UTF-8 text. An optional first line `@joiner "<json
//! string>"` sets the keyword separator. Few-shot exemplars for template
//! `NAME` live next to it in `NAME.examples.txt`, separated by `---` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::KeywordSet;

pub const KEYWORDS: &str = "keywords";
pub const EXAMPLES: &str = "examples";
pub const TEXT: &str = "text";

pub const SENTENCE: &str = "sentence";
pub const QUALITY_EVAL: &str = "quality_eval";
pub const DNC_REWRITE: &str = "dnc_rewrite";

const BUILTIN: &[(&str, &str, Option<&str>)] = &[
    (SENTENCE, include_str!("../../templates/sentence.txt"), None),
    (
        "recipe",
        include_str!("../../templates/recipe.txt"),
        Some(include_str!("../../templates/recipe.examples.txt")),
    ),
    (
        "table_to_text",
        include_str!("../../templates/table_to_text.txt"),
        Some(include_str!("../../templates/table_to_text.examples.txt")),
    ),
    (
        "profile",
        include_str!("../../templates/profile.txt"),
        Some(include_str!("../../templates/profile.examples.txt")),
    ),
    (
        QUALITY_EVAL,
        include_str!("../../templates/quality_eval.txt"),
        Some(include_str!("../../templates/quality_eval.examples.txt")),
    ),
    (DNC_REWRITE, include_str!("../../templates/dnc_rewrite.txt"), None),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {name:?} must contain exactly one {{keywords}} placeholder, found {found}")]
    Placeholder { name: String, found: usize },
    #[error("template {name:?} needs at least one keyword")]
    NoKeywords { name: String },
    #[error("unknown template {0:?}")]
    Unknown(String),
    #[error("template {path}: {message}")]
    File { path: String, message: String },
}

/// Replaces `{name}` placeholders in a single pass; substituted text is not
/// rescanned and unknown placeholders are left untouched.
pub fn substitute(body: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn count_placeholder(body: &str, name: &str) -> usize {
    body.matches(&format!("{{{name}}}")).count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub preamble: String,
    pub keyword_joiner: String,
    #[serde(default)]
    pub examples: Vec<String>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, preamble: impl Into<String>) -> Result<Self, TemplateError> {
        let tpl = Self {
            name: name.into(),
            preamble: preamble.into(),
            keyword_joiner: ", ".into(),
            examples: Vec::new(),
        };
        tpl.check()?;
        Ok(tpl)
    }

    /// The bare keyword-to-sentence prompt.
    pub fn sentence() -> Self {
        TemplateSet::builtin()
            .prompt(SENTENCE)
            .expect("built-in sentence template is valid")
    }

    pub fn with_joiner(mut self, joiner: impl Into<String>) -> Self {
        self.keyword_joiner = joiner.into();
        self
    }

    pub fn with_examples(mut self, examples: Vec<String>) -> Self {
        self.examples = examples;
        self
    }

    fn check(&self) -> Result<(), TemplateError> {
        let found = count_placeholder(&self.preamble, KEYWORDS);
        if found != 1 {
            return Err(TemplateError::Placeholder {
                name: self.name.clone(),
                found,
            });
        }
        Ok(())
    }

    fn examples_block(&self) -> String {
        if self.examples.is_empty() {
            String::new()
        } else {
            format!("{}\n\n", self.examples.join("\n\n"))
        }
    }

    /// Renders with an arbitrary keyword list (possibly empty) and extra variables.
    pub fn render_with(&self, keywords: &[&str], extra: &[(&str, &str)]) -> Result<String, TemplateError> {
        self.check()?;
        let joined = keywords.join(&self.keyword_joiner);
        let examples = self.examples_block();
        let mut vars: Vec<(&str, &str)> = vec![(KEYWORDS, joined.as_str()), (EXAMPLES, examples.as_str())];
        vars.extend_from_slice(extra);
        Ok(substitute(&self.preamble, &vars))
    }
}

/// Fills the template with the keywords of `set` in order.
pub fn render_prompt(tpl: &PromptTemplate, set: &KeywordSet) -> Result<String, TemplateError> {
    if set.is_empty() {
        return Err(TemplateError::NoKeywords { name: tpl.name.clone() });
    }
    tpl.render_with(&set.surfaces(), &[])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TemplateEntry {
    pub name: String,
    pub body: String,
    pub joiner: String,
    pub examples: Vec<String>,
    /// `None` for built-in templates.
    pub path: Option<PathBuf>,
}

impl TemplateEntry {
    fn parse(name: &str, text: &str, examples: Option<&str>, path: Option<PathBuf>) -> Result<Self, TemplateError> {
        let mut joiner = ", ".to_string();
        let mut body = text;
        if let Some(first) = text.lines().next() {
            if let Some(arg) = first.strip_prefix("@joiner ") {
                joiner = serde_json::from_str(arg.trim()).map_err(|e| TemplateError::File {
                    path: path
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_else(|| name.to_string()),
                    message: format!("bad @joiner directive: {e}"),
                })?;
                body = &text[first.len()..];
                body = body.strip_prefix('\n').unwrap_or(body);
            }
        }
        let body = body.strip_suffix('\n').unwrap_or(body).to_string();
        Ok(Self {
            name: name.to_string(),
            body,
            joiner,
            examples: examples.map(parse_examples).unwrap_or_default(),
            path,
        })
    }

    pub fn has_keywords_placeholder(&self) -> bool {
        count_placeholder(&self.body, KEYWORDS) == 1
    }
}

fn parse_examples(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut flush = |current: &mut Vec<&str>| {
        let joined = current.join("\n").trim().to_string();
        if !joined.is_empty() {
            out.push(joined);
        }
        current.clear();
    };
    for line in text.lines() {
        if line.trim() == "---" {
            flush(&mut current);
        } else {
            current.push(line);
        }
    }
    flush(&mut current);
    out
}

/// Named templates: the built-ins, optionally overridden from a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    entries: BTreeMap<String, TemplateEntry>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let entries = BUILTIN
            .iter()
            .map(|(name, body, examples)| {
                let entry = TemplateEntry::parse(name, body, *examples, None).expect("built-in template parses");
                (name.to_string(), entry)
            })
            .collect();
        Self { entries }
    }

    /// Built-ins plus every `*.txt` template in `dir` (files win on name clashes).
    pub fn with_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let file_err = |path: &Path, e: std::io::Error| TemplateError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| file_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        paths.sort();
        for path in paths {
            let Some(file_name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(name) = file_name.strip_suffix(".txt") else {
                continue;
            };
            if name.ends_with(".examples") {
                continue;
            }
            let body = fs::read_to_string(&path).map_err(|e| file_err(&path, e))?;
            let examples_path = dir.join(format!("{name}.examples.txt"));
            let examples = if examples_path.exists() {
                Some(fs::read_to_string(&examples_path).map_err(|e| file_err(&examples_path, e))?)
            } else {
                None
            };
            let entry = TemplateEntry::parse(name, &body, examples.as_deref(), Some(path.clone()))?;
            set.entries.insert(name.to_string(), entry);
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&TemplateEntry, TemplateError> {
        self.entries
            .get(name)
            .ok_or_else(|| TemplateError::Unknown(name.to_string()))
    }

    /// A keyword template by name, validated.
    pub fn prompt(&self, name: &str) -> Result<PromptTemplate, TemplateError> {
        let entry = self.get(name)?;
        let tpl = PromptTemplate {
            name: entry.name.clone(),
            preamble: entry.body.clone(),
            keyword_joiner: entry.joiner.clone(),
            examples: entry.examples.clone(),
        };
        tpl.check()?;
        Ok(tpl)
    }

    pub fn entries(&self) -> impl Iterator<Item = &TemplateEntry> {
        self.entries.values()
    }
}
