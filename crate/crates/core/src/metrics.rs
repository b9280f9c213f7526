//! Instance success, keyword coverage and their aggregates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{contains_keyword, KeywordSet, TokenizedText};
use crate::stats::{wilson_interval, Z_95};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("keyword coverage is undefined for an empty keyword set")]
    EmptyKeywordSet,
    #[error("no trials to aggregate")]
    NoTrials,
    #[error("trial {trial} has {found} keywords, expected {expected}")]
    KeywordCountMismatch {
        trial: usize,
        expected: usize,
        found: usize,
    },
    #[error("trial {trial} positions are not a permutation of 0..{m}")]
    BadPositions { trial: usize, m: usize },
}

/// Exact coverage ratio `satisfied / total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub satisfied: usize,
    pub total: usize,
}

impl Coverage {
    pub fn as_f64(&self) -> f64 {
        self.satisfied as f64 / self.total as f64
    }

    pub fn is_complete(&self) -> bool {
        self.satisfied == self.total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordOutcome {
    pub keyword: String,
    pub satisfied: bool,
    /// Position of the keyword in the prompt, 0-based.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub instance_success: u8,
    pub keyword_coverage: f64,
    pub coverage: Coverage,
    pub per_keyword: Vec<KeywordOutcome>,
}

pub fn instance_success(set: &KeywordSet, text: &TokenizedText) -> u8 {
    let policy = set.policy();
    set.keywords().iter().all(|k| contains_keyword(text, k, policy)) as u8
}

pub fn keyword_coverage(set: &KeywordSet, text: &TokenizedText) -> Result<Coverage, MetricsError> {
    if set.is_empty() {
        return Err(MetricsError::EmptyKeywordSet);
    }
    let satisfied = set.satisfied_flags(text).into_iter().filter(|&f| f).count();
    Ok(Coverage {
        satisfied,
        total: set.len(),
    })
}

/// Scores one generated text; positions are the keywords' indices in `set`.
pub fn trial_metrics(set: &KeywordSet, text: &TokenizedText) -> Result<TrialMetrics, MetricsError> {
    let flags = set.satisfied_flags(text);
    trial_metrics_from_flags(&set.surfaces(), &flags)
}

pub fn trial_metrics_from_flags<S: AsRef<str>>(keywords: &[S], flags: &[bool]) -> Result<TrialMetrics, MetricsError> {
    if keywords.is_empty() {
        return Err(MetricsError::EmptyKeywordSet);
    }
    let per_keyword: Vec<KeywordOutcome> = keywords
        .iter()
        .zip(flags)
        .enumerate()
        .map(|(position, (k, &satisfied))| KeywordOutcome {
            keyword: k.as_ref().to_string(),
            satisfied,
            position,
        })
        .collect();
    let coverage = Coverage {
        satisfied: flags.iter().filter(|&&f| f).count(),
        total: keywords.len(),
    };
    Ok(TrialMetrics {
        instance_success: coverage.is_complete() as u8,
        keyword_coverage: coverage.as_f64(),
        coverage,
        per_keyword,
    })
}

/// Coverage rate of each prompt position across trials.
pub fn positional_coverage(trials: &[TrialMetrics], m: usize) -> Result<Vec<f64>, MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::NoTrials);
    }
    let mut hits = vec![0usize; m];
    for (i, t) in trials.iter().enumerate() {
        if t.per_keyword.len() != m {
            return Err(MetricsError::KeywordCountMismatch {
                trial: i,
                expected: m,
                found: t.per_keyword.len(),
            });
        }
        let mut seen = vec![false; m];
        for k in &t.per_keyword {
            if k.position >= m || seen[k.position] {
                return Err(MetricsError::BadPositions { trial: i, m });
            }
            seen[k.position] = true;
            if k.satisfied {
                hits[k.position] += 1;
            }
        }
    }
    let n = trials.len() as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub n_trials: usize,
    pub mean_instance_success: f64,
    pub mean_keyword_coverage: f64,
    pub error_rate: f64,
    /// 95% Wilson interval for `mean_instance_success`.
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn aggregate(trials: &[TrialMetrics]) -> Result<AggregateSummary, MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::NoTrials);
    }
    let n = trials.len();
    let successes: f64 = trials.iter().map(|t| t.instance_success as f64).sum();
    let coverage: f64 = trials.iter().map(|t| t.keyword_coverage).sum();
    let mean_success = successes / n as f64;
    let (ci_low, ci_high) = wilson_interval(successes, n, Z_95);
    Ok(AggregateSummary {
        n_trials: n,
        mean_instance_success: mean_success,
        mean_keyword_coverage: coverage / n as f64,
        error_rate: 1.0 - mean_success,
        ci_low,
        ci_high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{normalize_and_tokenize, MatchPolicy};

    fn set(words: &[&str]) -> KeywordSet {
        KeywordSet::new(words, MatchPolicy::default()).unwrap()
    }

    fn text(s: &str) -> TokenizedText {
        normalize_and_tokenize(s, &MatchPolicy::default())
    }

    fn flags(f: &[bool]) -> TrialMetrics {
        let names: Vec<String> = (0..f.len()).map(|i| format!("k{i}")).collect();
        trial_metrics_from_flags(&names, f).unwrap()
    }

    #[test]
    fn success_and_coverage() {
        let x = set(&["cat", "dog", "run"]);
        assert_eq!(instance_success(&x, &text("run cat dog")), 1);
        assert_eq!(instance_success(&x, &text("run cat")), 0);
        assert_eq!(instance_success(&set(&[]), &text("anything")), 1);

        let c = keyword_coverage(&x, &text("the dog runs to the cat")).unwrap();
        assert_eq!(c, Coverage { satisfied: 2, total: 3 });
        assert!((c.as_f64() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            keyword_coverage(&set(&[]), &text("x")),
            Err(MetricsError::EmptyKeywordSet)
        );
    }

    #[test]
    fn coverage_ratios() {
        let mut f = vec![true; 5];
        f.extend(vec![false; 5]);
        assert_eq!(flags(&f).keyword_coverage, 0.5);
        assert_eq!(flags(&[false; 7]).keyword_coverage, 0.0);
    }

    #[test]
    fn positional_coverage_counts_per_position() {
        let trials = vec![flags(&[true, false]), flags(&[true, false])];
        assert_eq!(positional_coverage(&trials, 2).unwrap(), vec![1.0, 0.0]);
        assert_eq!(positional_coverage(&[], 2), Err(MetricsError::NoTrials));
        assert!(matches!(
            positional_coverage(&trials, 3),
            Err(MetricsError::KeywordCountMismatch { .. })
        ));
        let mut bad = flags(&[true, true]);
        bad.per_keyword[1].position = 0;
        assert!(matches!(
            positional_coverage(&[bad], 2),
            Err(MetricsError::BadPositions { .. })
        ));
    }

    #[test]
    fn aggregates() {
        let all = vec![flags(&[true]); 4];
        let s = aggregate(&all).unwrap();
        assert_eq!(s.mean_instance_success, 1.0);
        assert_eq!(s.error_rate, 0.0);
        assert!(s.ci_low < 1.0 && s.ci_high == 1.0);

        let s = aggregate(&[flags(&[true]), flags(&[false])]).unwrap();
        assert_eq!(s.mean_instance_success, 0.5);
        assert_eq!(s.error_rate, 0.5);
        assert_eq!(aggregate(&[]), Err(MetricsError::NoTrials));
    }
}
