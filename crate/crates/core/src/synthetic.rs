//! Seeded statistical stand-in for an LLM.
//!
//! Each requested keyword is included independently with a probability that
//! depends on its prompt position and on how many keywords were requested.
//! Randomness comes from a ChaCha stream keyed by the model seed, selected by
//! the call index and addressed by keyword index, so every draw is a pure
//! function of `(seed, call_index, i)`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CallId, CallPurpose, GenerationRequest, GenerationResult};
use crate::constraint::MatchPolicy;
use crate::strategies::StrategyId;

/// Number of keywords a prompt can hold before `count_decay` applies.
pub const DECAY_FREE_KEYWORDS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic model config: {0}")]
    InvalidConfig(String),
    #[error("closed form needs the independence regime: {0}")]
    OutsideIndependenceRegime(String),
    #[error("compound file {path}: {message}")]
    Compounds { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    #[default]
    None,
    Primacy,
    Recency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticModelConfig {
    pub base_coverage: f64,
    pub bias_mode: BiasMode,
    pub bias_strength: f64,
    pub count_decay: f64,
    pub compound_split_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticModelConfig {
    fn default() -> Self {
        Self {
            base_coverage: 0.8,
            bias_mode: BiasMode::None,
            bias_strength: 0.0,
            count_decay: 1.0,
            compound_split_prob: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticModelConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let in_unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SyntheticError::InvalidConfig(format!(
                    "{name} must be in [0, 1], got {v}"
                )))
            }
        };
        in_unit("base_coverage", self.base_coverage)?;
        in_unit("count_decay", self.count_decay)?;
        in_unit("compound_split_prob", self.compound_split_prob)?;
        if self.bias_strength.is_nan() || self.bias_strength < 0.0 {
            return Err(SyntheticError::InvalidConfig(format!(
                "bias_strength must be >= 0, got {}",
                self.bias_strength
            )));
        }
        Ok(())
    }

    /// Position weight `w_i` for 0-based position `i` among `m` keywords.
    pub fn position_weight(&self, i: usize, m: usize) -> f64 {
        if m <= 1 {
            return 1.0;
        }
        let span = (m - 1) as f64;
        match self.bias_mode {
            BiasMode::None => 1.0,
            BiasMode::Primacy => 1.0 + self.bias_strength * (m - 1 - i) as f64 / span,
            BiasMode::Recency => 1.0 + self.bias_strength * i as f64 / span,
        }
    }

    /// `p_i = clamp(p0 * d^max(0, m - 5) * w_i, 0, 1)`.
    pub fn inclusion_probability(&self, i: usize, m: usize) -> f64 {
        let excess = m.saturating_sub(DECAY_FREE_KEYWORDS) as i32;
        (self.base_coverage * self.count_decay.powi(excess) * self.position_weight(i, m)).clamp(0.0, 1.0)
    }

    fn is_independent(&self) -> Result<(), SyntheticError> {
        if self.bias_mode != BiasMode::None && self.bias_strength != 0.0 {
            return Err(SyntheticError::OutsideIndependenceRegime("position bias is set".into()));
        }
        if self.count_decay != 1.0 {
            return Err(SyntheticError::OutsideIndependenceRegime("count_decay != 1".into()));
        }
        if self.compound_split_prob != 0.0 {
            return Err(SyntheticError::OutsideIndependenceRegime(
                "compound_split_prob != 0".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form probability that a strategy satisfies all `m` keywords when
/// every keyword is included independently with probability `p0`.
///
/// * vanilla: `p0^m`
/// * rejection sampling with budget `k`: `1 - (1 - p0^m)^(k+1)`
/// * divide and conquer with budget `k`: `(1 - (1 - p0)^(k+1))^m`
pub fn implied_instance_success(
    cfg: &SyntheticModelConfig,
    m: usize,
    strategy: StrategyId,
    k: u32,
) -> Result<f64, SyntheticError> {
    cfg.validate()?;
    cfg.is_independent()?;
    let p0 = cfg.base_coverage;
    let m = m as i32;
    let tries = k as i32 + 1;
    Ok(match strategy {
        StrategyId::Vanilla => p0.powi(m),
        StrategyId::Rj => 1.0 - (1.0 - p0.powi(m)).powi(tries),
        StrategyId::Dnc => (1.0 - (1.0 - p0).powi(tries)).powi(m),
    })
}

/// Compound words with their two constituents, keyed by normalized word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompoundTable {
    entries: HashMap<String, (String, String)>,
}

impl CompoundTable {
    /// Parses `word<TAB>part1<TAB>part2` lines; blank lines and `#` comments are skipped.
    pub fn parse(contents: &str) -> Result<Self, String> {
        let policy = MatchPolicy::default();
        let mut entries = HashMap::new();
        for (lineno, line) in contents.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(format!("line {}: expected word<TAB>part1<TAB>part2", lineno + 1));
            }
            let key = crate::constraint::normalize_and_tokenize(fields[0], &policy)
                .tokens
                .join(" ");
            entries.insert(key, (fields[1].to_string(), fields[2].to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, SyntheticError> {
        let err = |message: String| SyntheticError::Compounds {
            path: path.display().to_string(),
            message,
        };
        let contents = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::parse(&contents).map_err(err)
    }

    pub fn parts(&self, word: &str) -> Option<&(String, String)> {
        let key = crate::constraint::normalize_and_tokenize(word, &MatchPolicy::default())
            .tokens
            .join(" ");
        self.entries.get(&key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a call id onto the integer that selects the random stream.
pub fn call_index(call: &CallId) -> u64 {
    let purpose = match call.purpose {
        CallPurpose::Generate => 0u64,
        CallPurpose::Rewrite => 1,
        CallPurpose::Judge => 2,
    };
    splitmix64(splitmix64(call.trial) ^ ((call.attempt as u64) << 2 | purpose))
}

/// Per-keyword draws for one call: `(include, split)` uniforms in [0, 1).
fn keyword_draws(seed: u64, call_index: u64, i: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(call_index);
    rng.set_word_pos(i as u128 * 4);
    (rng.random::<f64>(), rng.random::<f64>())
}

/// Generates the template sentence "A story about k1, k2, ..." for one call.
pub fn synth_generate<S: AsRef<str>>(
    keywords: &[S],
    cfg: &SyntheticModelConfig,
    compounds: &CompoundTable,
    call_index: u64,
) -> String {
    let m = keywords.len();
    let mut emitted = Vec::new();
    for (i, kw) in keywords.iter().enumerate() {
        let kw = kw.as_ref();
        let (include, split) = keyword_draws(cfg.seed, call_index, i);
        if include >= cfg.inclusion_probability(i, m) {
            continue;
        }
        match compounds.parts(kw) {
            Some((left, right)) if split < cfg.compound_split_prob => {
                emitted.push(format!("{left} {right}"));
            }
            _ => emitted.push(kw.to_string()),
        }
    }
    if emitted.is_empty() {
        "A story.".to_string()
    } else {
        format!("A story about {}.", emitted.join(", "))
    }
}

/// Backend wrapper around [`synth_generate`]. Decoding parameters are
/// ignored. Requests without a keyword hint (rewrites, judge prompts) get an
/// empty completion.
pub struct SyntheticBackend {
    cfg: SyntheticModelConfig,
    compounds: CompoundTable,
}

impl SyntheticBackend {
    pub fn new(cfg: SyntheticModelConfig, compounds: CompoundTable) -> Result<Self, SyntheticError> {
        cfg.validate()?;
        Ok(Self { cfg, compounds })
    }

    pub fn config(&self) -> &SyntheticModelConfig {
        &self.cfg
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let text = if req.keywords.is_empty() {
            String::new()
        } else {
            synth_generate(&req.keywords, &self.cfg, &self.compounds, call_index(&req.call))
        };
        Ok(GenerationResult {
            text,
            latency_ms: 0.0,
            prompt_tokens: None,
            completion_tokens: None,
            backend_id: "synthetic".into(),
            cached: false,
        })
    }
}
