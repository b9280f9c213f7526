//! Bundled sample inputs and input-file references.
//!
//! Any place a config takes a data file it also accepts `builtin:<name>`
//! for one of the files shipped with the crate.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

const BUILTIN: &[(&str, &str)] = &[
    ("concepts", include_str!("../data/concepts.txt")),
    ("control_words", include_str!("../data/control_words.txt")),
    ("compounds", include_str!("../data/compounds.tsv")),
    ("ingredients", include_str!("../data/ingredients.txt")),
    ("table_keys", include_str!("../data/table_keys.txt")),
    ("clients", include_str!("../data/clients.jsonl")),
    ("commongen_sample", include_str!("../data/commongen_sample.jsonl")),
];

const PREFIX: &str = "builtin:";

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, body)| *body)
}

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

/// A data file reference: `builtin:<name>` or a filesystem path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataRef(pub String);

impl DataRef {
    pub fn builtin(name: &str) -> Self {
        Self(format!("{PREFIX}{name}"))
    }

    pub fn builtin_name(&self) -> Option<&str> {
        self.0.strip_prefix(PREFIX)
    }

    /// Resolves a relative path against `base` (the config file's directory).
    pub fn resolve(&self, base: &Path) -> Self {
        if self.builtin_name().is_some() || Path::new(&self.0).is_absolute() {
            self.clone()
        } else {
            Self(base.join(&self.0).to_string_lossy().into_owned())
        }
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.builtin_name().is_none().then(|| PathBuf::from(&self.0))
    }

    pub fn exists(&self) -> bool {
        match self.builtin_name() {
            Some(name) => builtin(name).is_some(),
            None => Path::new(&self.0).exists(),
        }
    }

    pub fn read(&self) -> Result<String, String> {
        match self.builtin_name() {
            Some(name) => builtin(name)
                .map(str::to_string)
                .ok_or_else(|| format!("unknown builtin data {name:?}")),
            None => fs::read_to_string(&self.0).map_err(|e| format!("{}: {e}", self.0)),
        }
    }
}

impl std::fmt::Display for DataRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{KeywordSet, Lexicon, MatchPolicy};
    use crate::synthetic::CompoundTable;
    use std::collections::HashSet;

    fn lines(name: &str) -> Vec<String> {
        builtin(name)
            .unwrap()
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect()
    }

    #[test]
    fn resolves_paths() {
        let base = Path::new("/cfg");
        assert_eq!(DataRef("x.txt".into()).resolve(base).0, "/cfg/x.txt");
        assert_eq!(DataRef::builtin("concepts").resolve(base).0, "builtin:concepts");
        assert!(DataRef::builtin("concepts").exists());
        assert!(!DataRef::builtin("nope").exists());
        assert!(DataRef::builtin("nope").read().is_err());
    }

    #[test]
    fn compound_and_control_lists_are_disjoint() {
        let compounds = lines("compounds");
        assert_eq!(compounds.len(), 200);
        let table = CompoundTable::parse(builtin("compounds").unwrap()).unwrap();
        assert_eq!(table.len(), 200);
        let mut parts = HashSet::new();
        for row in &compounds {
            let f: Vec<&str> = row.split('\t').collect();
            assert_eq!(f[0], format!("{}{}", f[1], f[2]));
            assert!(f[1].len() >= 3 && f[2].len() >= 3);
            parts.insert(f[1].to_string());
            parts.insert(f[2].to_string());
        }
        let controls = lines("control_words");
        assert_eq!(controls.len(), 200);
        for c in &controls {
            assert!(!parts.contains(c), "{c} is a compound part");
            assert!(table.parts(c).is_none());
        }
        // the synthetic model's filler words never collide with keywords
        for filler in ["a", "story", "about"] {
            assert!(!parts.contains(filler));
            assert!(!lines("concepts").iter().any(|w| w == filler));
        }
        let lex = Lexicon::from_words(parts, &MatchPolicy::default());
        assert!(lex.contains("jelly"));
    }

    #[test]
    fn pools_have_unique_keywords() {
        for name in ["concepts", "control_words", "ingredients", "table_keys"] {
            let words = lines(name);
            KeywordSet::new(&words, MatchPolicy::default()).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
