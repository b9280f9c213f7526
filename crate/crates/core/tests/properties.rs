use proptest::prelude::*;

use lexcon_core::backend::{DecodingParams, ScriptedBackend};
use lexcon_core::constraint::{
    detect_compound_split, normalize_and_tokenize, Keyword, KeywordSet, Lexicon, MatchPolicy,
};
use lexcon_core::metrics::{instance_success, keyword_coverage, trial_metrics};
use lexcon_core::strategies::{
    dnc_generate, rejection_sampling, vanilla_generate, GenContext, MergeMode, PromptTemplate, Termination,
};
use lexcon_core::synthetic::{CompoundTable, SyntheticBackend, SyntheticModelConfig};

const VOCAB: &[&str] = &["cat", "dog", "sun", "red", "ice", "box", "jelly", "fish", "run", "tree"];

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(VOCAB).prop_map(str::to_string)
}

fn text_words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 0..30)
}

/// Keywords of one or two vocabulary words, distinct after normalization.
fn keyword_surfaces() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::collection::vec(word(), 1..=2).prop_map(|w| w.join(" ")), 1..=6).prop_map(|mut v| {
        let mut seen = std::collections::HashSet::new();
        v.retain(|k| seen.insert(k.clone()));
        v
    })
}

fn separator() -> impl Strategy<Value = &'static str> {
    prop::sample::select(&[" ", ", ", ". ", " - ", "\n", "; "][..])
}

fn render(words: &[String], seps: &[&str]) -> String {
    let mut s = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            s.push_str(seps[i % seps.len()]);
        }
        s.push_str(w);
    }
    s
}

/// Window scan written independently of the library matcher.
fn oracle_contains(text: &[String], parts: &[String]) -> bool {
    if parts.is_empty() || parts.len() > text.len() {
        return false;
    }
    (0..=text.len() - parts.len()).any(|start| (0..parts.len()).all(|j| text[start + j] == parts[j]))
}

fn keyword_parts(surface: &str) -> Vec<String> {
    surface.split_whitespace().map(|w| w.to_lowercase()).collect()
}

proptest! {
    #[test]
    fn tokenizer_is_deterministic_and_spans_reconstruct(raw in "[a-zA-Z' ,.\u{e9}\u{2019}-]{0,60}") {
        let p = MatchPolicy::default();
        let a = normalize_and_tokenize(&raw, &p);
        let b = normalize_and_tokenize(&raw, &p);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.tokens.len(), a.spans.len());
        let chars: Vec<char> = raw.chars().collect();
        let mut last_end = 0;
        for (tok, span) in a.tokens.iter().zip(&a.spans) {
            prop_assert!(span.start >= last_end && span.start < span.end && span.end <= chars.len());
            last_end = span.end;
            let slice: String = chars[span.start..span.end].iter().collect();
            prop_assert_eq!(slice.replace('\u{2019}', "'").to_lowercase(), tok.clone());
        }
    }

    #[test]
    fn matcher_agrees_with_window_oracle(words in text_words(), seps in prop::collection::vec(separator(), 1..4), surfaces in keyword_surfaces()) {
        let raw = render(&words, &seps);
        let set = KeywordSet::new(&surfaces, MatchPolicy::default()).unwrap();
        let text = set.tokenize(&raw);
        prop_assert_eq!(&text.tokens, &words);
        let expected: Vec<bool> = surfaces.iter().map(|s| oracle_contains(&words, &keyword_parts(s))).collect();
        prop_assert_eq!(set.satisfied_flags(&text), expected.clone());
        let hits = expected.iter().filter(|&&f| f).count();
        prop_assert_eq!(instance_success(&set, &text), (hits == surfaces.len()) as u8);
        let cov = keyword_coverage(&set, &text).unwrap();
        prop_assert_eq!(cov.satisfied, hits);
        prop_assert_eq!(cov.total, surfaces.len());
    }

    #[test]
    fn appending_text_never_loses_a_keyword(a in text_words(), b in text_words(), surfaces in keyword_surfaces()) {
        let set = KeywordSet::new(&surfaces, MatchPolicy::default()).unwrap();
        let before = set.satisfied_flags(&set.tokenize(&a.join(" ")));
        let after = set.satisfied_flags(&set.tokenize(&format!("{} {}", a.join(" "), b.join(" "))));
        for (x, y) in before.iter().zip(&after) {
            prop_assert!(!x || *y);
        }
    }

    #[test]
    fn matching_ignores_case(words in text_words(), surfaces in keyword_surfaces(), upper_kw in any::<bool>()) {
        let p = MatchPolicy::default();
        let raw = words.join(" ");
        let kws: Vec<String> = if upper_kw { surfaces.iter().map(|s| s.to_uppercase()).collect() } else { surfaces.clone() };
        let set = KeywordSet::new(&kws, p).unwrap();
        let base = KeywordSet::new(&surfaces, p).unwrap();
        prop_assert_eq!(
            set.satisfied_flags(&set.tokenize(&raw.to_uppercase())),
            base.satisfied_flags(&base.tokenize(&raw))
        );
    }

    #[test]
    fn morphological_matching_only_adds_matches(words in text_words(), suffix in prop::sample::select(&["s", "es", "ing", "ed", ""][..]), surfaces in keyword_surfaces()) {
        let raw: Vec<String> = words.iter().map(|w| format!("{w}{suffix}")).collect();
        let raw = raw.join(" ");
        let exact = KeywordSet::new(&surfaces, MatchPolicy::exact()).unwrap();
        let morph = KeywordSet::new(&surfaces, MatchPolicy::morphological()).unwrap();
        let e = exact.satisfied_flags(&exact.tokenize(&raw));
        let m = morph.satisfied_flags(&morph.tokenize(&raw));
        for (x, y) in e.iter().zip(&m) {
            prop_assert!(!x || *y);
        }
    }

    #[test]
    fn detected_split_halves_concatenate_to_keyword(left in prop::sample::select(VOCAB), right in prop::sample::select(VOCAB), noise in text_words(), lexicon_on in any::<bool>()) {
        let p = MatchPolicy::default();
        let surface = format!("{left}{right}");
        let kw = Keyword::new(&surface, &p).unwrap();
        let lexicon = if lexicon_on { Lexicon::from_words(VOCAB, &p) } else { Lexicon::default() };
        let raw = format!("{} {left} {right}", noise.join(" "));
        let text = normalize_and_tokenize(&raw, &p);
        let found = detect_compound_split(&kw, &text, &lexicon, &p);
        prop_assert!(found.is_some());
        let (l, r) = found.unwrap();
        prop_assert_eq!(format!("{l}{r}"), surface.clone());
        prop_assert!(l.chars().count() >= 3 && r.chars().count() >= 3);
        // the joined form is a match, not a split
        let joined = normalize_and_tokenize(&format!("{raw} {surface}"), &p);
        prop_assert!(detect_compound_split(&kw, &joined, &lexicon, &p).is_none());
    }

    #[test]
    fn metrics_are_invariant_under_keyword_order(words in text_words(), surfaces in keyword_surfaces(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let raw = words.join(" ");
        let mut shuffled = surfaces.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = KeywordSet::new(&surfaces, MatchPolicy::default()).unwrap();
        let b = KeywordSet::new(&shuffled, MatchPolicy::default()).unwrap();
        let ma = trial_metrics(&a, &a.tokenize(&raw)).unwrap();
        let mb = trial_metrics(&b, &b.tokenize(&raw)).unwrap();
        prop_assert_eq!(ma.instance_success, mb.instance_success);
        prop_assert_eq!(ma.coverage, mb.coverage);
        for k in &ma.per_keyword {
            let other = mb.per_keyword.iter().find(|o| o.keyword == k.keyword).unwrap();
            prop_assert_eq!(k.satisfied, other.satisfied);
        }
    }

    #[test]
    fn dnc_missing_set_shrinks(responses in prop::collection::vec(text_words(), 1..8), surfaces in keyword_surfaces(), k in 0u32..6) {
        let backend = ScriptedBackend::new(responses.iter().map(|w| w.join(" ")).chain(std::iter::repeat_n(String::new(), 8)));
        let params = DecodingParams::greedy();
        let ctx = GenContext::new(&backend, "m", &params);
        let set = KeywordSet::new(&surfaces, MatchPolicy::default()).unwrap();
        let out = dnc_generate(&ctx, &PromptTemplate::sentence(), &set, k, MergeMode::Concat, None).unwrap();
        prop_assert!(out.iterations_used <= k + 1);
        prop_assert_eq!(out.iterations_used as usize, out.trace.len());
        let mut missing: Vec<String> = surfaces.clone();
        for step in &out.trace {
            for kw in &missing {
                prop_assert!(step.prompt.contains(kw.as_str()));
            }
            prop_assert!(step.newly_satisfied.iter().all(|n| missing.contains(n)));
            missing.retain(|m| !step.newly_satisfied.contains(m));
        }
        let satisfied: Vec<String> = surfaces.iter().zip(&out.satisfied).filter(|(_, &s)| s).map(|(k, _)| k.clone()).collect();
        // concatenation keeps every covered keyword; a multi-word keyword may
        // also form across a response boundary
        for kw in &surfaces {
            prop_assert!(missing.contains(kw) || satisfied.contains(kw));
        }
        prop_assert_eq!(out.terminated_by == Termination::AllSatisfied, out.all_satisfied());
        if !missing.is_empty() {
            prop_assert_eq!(out.iterations_used, k + 1);
        }
    }

    #[test]
    fn zero_budget_strategies_equal_vanilla(surfaces in keyword_surfaces(), p0 in 0.0f64..=1.0, seed in any::<u64>(), trial in 0u64..1000) {
        let cfg = SyntheticModelConfig { base_coverage: p0, seed, ..Default::default() };
        let backend = SyntheticBackend::new(cfg, CompoundTable::default()).unwrap();
        let params = DecodingParams::greedy();
        let ctx = GenContext::new(&backend, "m", &params).with_trial(trial);
        let tpl = PromptTemplate::sentence();
        let set = KeywordSet::new(&surfaces, MatchPolicy::default()).unwrap();
        let v = vanilla_generate(&ctx, &tpl, &set).unwrap();
        let r = rejection_sampling(&ctx, &tpl, &set, 0).unwrap();
        let d = dnc_generate(&ctx, &tpl, &set, 0, MergeMode::Concat, None).unwrap();
        prop_assert_eq!(&v.final_text, &r.final_text);
        prop_assert_eq!(&v.final_text, &d.final_text);
        prop_assert_eq!(&v.satisfied, &r.satisfied);
        prop_assert_eq!(&v.satisfied, &d.satisfied);
        prop_assert_eq!(v.iterations_used, 1);
        prop_assert_eq!(d.iterations_used, 1);
    }

    #[test]
    fn synthetic_calls_are_reproducible(surfaces in keyword_surfaces(), seed in any::<u64>(), trial in any::<u64>()) {
        let cfg = SyntheticModelConfig { seed, ..Default::default() };
        let a = SyntheticBackend::new(cfg.clone(), CompoundTable::default()).unwrap();
        let b = SyntheticBackend::new(cfg, CompoundTable::default()).unwrap();
        let params = DecodingParams::greedy();
        let set = KeywordSet::new(&surfaces, MatchPolicy::default()).unwrap();
        let tpl = PromptTemplate::sentence();
        let oa = rejection_sampling(&GenContext::new(&a, "m", &params).with_trial(trial), &tpl, &set, 3).unwrap();
        let ob = rejection_sampling(&GenContext::new(&b, "m", &params).with_trial(trial), &tpl, &set, 3).unwrap();
        prop_assert_eq!(oa, ob);
    }
}
