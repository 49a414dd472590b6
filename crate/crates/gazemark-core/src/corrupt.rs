//! Seeded synthetic error injection for the error-detection task.
//!
//! Each study independently keeps its report or receives exactly one
//! rule-based corruption in exactly one sentence. All randomness comes
//! from a generator derived from (run seed, study_id), so outputs are
//! reproducible regardless of processing order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::extract::{scan_mentions, DiagnosisLexicon};
use crate::task::{Report, TaskError};
use crate::text;

/// The four rule-based corruption kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    NegationFlip,
    LateralitySwap,
    SeveritySwap,
    EntitySubstitution,
}

/// Provenance record for one corrupted report. `original` and `corrupted`
/// are the full findings texts; they differ in exactly the sentence at
/// `sentence_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorInjection {
    pub study_id: String,
    pub sentence_index: usize,
    pub error_kind: ErrorKind,
    pub original: String,
    pub corrupted: String,
    pub label: String,
}

/// Whether a report was corrupted, with provenance when it was.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectionOutcome {
    Clean,
    Corrupted(ErrorInjection),
}

impl InjectionOutcome {
    /// Gold answer for the error-detection task.
    pub fn label(&self) -> &'static str {
        match self {
            InjectionOutcome::Clean => "N",
            InjectionOutcome::Corrupted(_) => "Y",
        }
    }
}

const NEGATION_CUES: &[&str] = &["no", "not", "without"];

const SEVERITY_PAIRS: &[(&str, &str)] = &[
    ("mild", "severe"),
    ("small", "large"),
    ("minimal", "extensive"),
    ("slight", "marked"),
    ("trace", "massive"),
];

/// Deterministic per-study generator: ChaCha8 keyed by
/// sha256(seed_le_bytes || study_id).
fn study_rng(seed: u64, study_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(study_id.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Byte ranges of alphanumeric runs in `s`.
fn word_runs(s: &str) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        if ch.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(b) = start.take() {
            runs.push((b, i));
        }
    }
    if let Some(b) = start {
        runs.push((b, s.len()));
    }
    runs
}

/// Re-case `replacement` to follow `original`: all-caps stays all-caps,
/// leading capital stays capitalized.
fn match_case(original: &str, replacement: &str) -> String {
    let has_alpha = original.chars().any(|c| c.is_alphabetic());
    if has_alpha && original.chars().all(|c| !c.is_alphabetic() || c.is_uppercase()) {
        return replacement.to_uppercase();
    }
    if original.chars().next().is_some_and(|c| c.is_uppercase()) {
        let mut chars = replacement.chars();
        return match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => String::new(),
        };
    }
    replacement.to_string()
}

fn capitalize_first_alpha(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut done = false;
    for ch in s.chars() {
        if !done && ch.is_alphabetic() {
            out.extend(ch.to_uppercase());
            done = true;
        } else {
            out.push(ch);
        }
    }
    out
}

fn lowercase_first_alpha(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut done = false;
    for ch in s.chars() {
        if !done && ch.is_alphabetic() {
            out.extend(ch.to_lowercase());
            done = true;
        } else {
            out.push(ch);
        }
    }
    out
}

/// Remove the first negation cue ("no"/"not"/"without") and re-capitalize,
/// or negate an affirmative sentence by prepending "No ". Total: every
/// sentence has a flipped form that differs from it.
pub(crate) fn flip_negation(sentence: &str) -> String {
    for (start, end) in word_runs(sentence) {
        let word = &sentence[start..end];
        if NEGATION_CUES.iter().any(|c| word.eq_ignore_ascii_case(c)) {
            let mut cut_end = end;
            if sentence[end..].starts_with(' ') {
                cut_end += 1;
            }
            let remainder = format!("{}{}", &sentence[..start], &sentence[cut_end..]);
            return capitalize_first_alpha(remainder.trim_start());
        }
    }
    format!("No {}", lowercase_first_alpha(sentence))
}

fn laterality_partner(word: &str) -> Option<&'static str> {
    if word.eq_ignore_ascii_case("left") {
        Some("right")
    } else if word.eq_ignore_ascii_case("right") {
        Some("left")
    } else {
        None
    }
}

/// Swap every standalone "left"/"right", preserving case. None when the
/// sentence mentions neither.
pub(crate) fn swap_laterality(sentence: &str) -> Option<String> {
    let mut out = String::with_capacity(sentence.len());
    let mut cursor = 0;
    let mut swapped = false;
    for (start, end) in word_runs(sentence) {
        let word = &sentence[start..end];
        if let Some(partner) = laterality_partner(word) {
            out.push_str(&sentence[cursor..start]);
            out.push_str(&match_case(word, partner));
            cursor = end;
            swapped = true;
        }
    }
    if !swapped {
        return None;
    }
    out.push_str(&sentence[cursor..]);
    Some(out)
}

fn severity_partner(word: &str) -> Option<&'static str> {
    for &(a, b) in SEVERITY_PAIRS {
        if word.eq_ignore_ascii_case(a) {
            return Some(b);
        }
        if word.eq_ignore_ascii_case(b) {
            return Some(a);
        }
    }
    None
}

/// Replace the earliest severity grade with its opposite, preserving case.
/// None when the sentence carries no graded term.
pub(crate) fn swap_severity(sentence: &str) -> Option<String> {
    for (start, end) in word_runs(sentence) {
        let word = &sentence[start..end];
        if let Some(partner) = severity_partner(word) {
            return Some(format!(
                "{}{}{}",
                &sentence[..start],
                match_case(word, partner),
                &sentence[end..]
            ));
        }
    }
    None
}

/// Canonical names that could replace `surface` without naming the same
/// entity, in icd_code order.
fn substitution_candidates<'a>(
    surface: &str,
    lexicon: &'a DiagnosisLexicon,
) -> Vec<&'a str> {
    let norm = text::normalize(surface);
    let surface_codes = lexicon.codes_for_name(&norm);
    lexicon
        .entries()
        .iter()
        .filter(|e| text::normalize(&e.canonical_name) != norm)
        .filter(|e| !surface_codes.contains(&e.icd_code))
        .map(|e| e.canonical_name.as_str())
        .collect()
}

/// Replace the first recognized phenotype mention with a different
/// diagnosis name chosen by `rng`. None when nothing is recognized or the
/// lexicon offers no distinct replacement.
pub(crate) fn substitute_entity(
    sentence: &str,
    lexicon: &DiagnosisLexicon,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let mention = scan_mentions(sentence, lexicon).into_iter().next()?;
    let candidates = substitution_candidates(&mention.surface, lexicon);
    if candidates.is_empty() {
        return None;
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    Some(format!(
        "{}{}{}",
        &sentence[..mention.start],
        match_case(&mention.surface, pick),
        &sentence[mention.end..]
    ))
}

/// Corrupt `report.findings` with probability `corrupt_probability`,
/// deterministically in (seed, study_id).
///
/// Eligible sentences are those containing a recognized phenotype term;
/// when none match, every sentence is eligible. One sentence and one
/// applicable corruption kind are drawn uniformly; negation flipping is
/// always applicable, so the draw never dead-ends. The corrupted findings
/// always differ from the original, and only in the chosen sentence.
pub fn inject_error(
    report: &Report,
    seed: u64,
    corrupt_probability: f64,
    lexicon: &DiagnosisLexicon,
) -> Result<(Report, InjectionOutcome), TaskError> {
    let findings = &report.findings;
    let spans = text::split_sentences(findings);
    if spans.is_empty() {
        return Err(TaskError::NoSentences);
    }

    let mut rng = study_rng(seed, &report.study_id);
    if rng.random::<f64>() >= corrupt_probability {
        return Ok((report.clone(), InjectionOutcome::Clean));
    }

    let mentions_per: Vec<bool> = spans
        .iter()
        .map(|sp| !scan_mentions(sp.core(findings), lexicon).is_empty())
        .collect();
    let eligible: Vec<usize> = (0..spans.len()).filter(|&i| mentions_per[i]).collect();
    let pool: Vec<usize> = if eligible.is_empty() {
        (0..spans.len()).collect()
    } else {
        eligible
    };
    let sentence_index = pool[rng.random_range(0..pool.len())];
    let span = spans[sentence_index];
    let core = span.core(findings);

    let mut kinds = vec![ErrorKind::NegationFlip];
    if swap_laterality(core).is_some() {
        kinds.push(ErrorKind::LateralitySwap);
    }
    if swap_severity(core).is_some() {
        kinds.push(ErrorKind::SeveritySwap);
    }
    let has_substitution = scan_mentions(core, lexicon)
        .first()
        .is_some_and(|m| !substitution_candidates(&m.surface, lexicon).is_empty());
    if has_substitution {
        kinds.push(ErrorKind::EntitySubstitution);
    }

    let error_kind = kinds[rng.random_range(0..kinds.len())];
    let corrupted_core = match error_kind {
        ErrorKind::NegationFlip => flip_negation(core),
        ErrorKind::LateralitySwap => swap_laterality(core).expect("checked applicable"),
        ErrorKind::SeveritySwap => swap_severity(core).expect("checked applicable"),
        ErrorKind::EntitySubstitution => {
            substitute_entity(core, lexicon, &mut rng).expect("checked applicable")
        }
    };
    debug_assert_ne!(corrupted_core, core);

    let trailing = &findings[span.start + core.len()..span.end];
    let corrupted_findings = format!(
        "{}{}{}{}",
        &findings[..span.start],
        corrupted_core,
        trailing,
        &findings[span.end..]
    );
    let corrupted_report = Report {
        study_id: report.study_id.clone(),
        findings: corrupted_findings.clone(),
        impression: report.impression.clone(),
    };
    let injection = ErrorInjection {
        study_id: report.study_id.clone(),
        sentence_index,
        error_kind,
        original: findings.clone(),
        corrupted: corrupted_findings,
        label: "Y".to_string(),
    };
    Ok((corrupted_report, InjectionOutcome::Corrupted(injection)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::LexiconEntry;

    fn lexicon() -> DiagnosisLexicon {
        DiagnosisLexicon::new(vec![
            LexiconEntry {
                icd_code: "J18.9".to_string(),
                canonical_name: "pneumonia".to_string(),
                synonyms: vec!["lung infection".to_string()],
                embedding: None,
            },
            LexiconEntry {
                icd_code: "J90".to_string(),
                canonical_name: "pleural effusion".to_string(),
                synonyms: vec!["effusion".to_string()],
                embedding: None,
            },
            LexiconEntry {
                icd_code: "I51.7".to_string(),
                canonical_name: "cardiomegaly".to_string(),
                synonyms: vec![],
                embedding: None,
            },
        ])
        .unwrap()
    }

    fn report(findings: &str) -> Report {
        Report {
            study_id: "s1".to_string(),
            findings: findings.to_string(),
            impression: "See findings.".to_string(),
        }
    }

    #[test]
    fn negation_flip_rules() {
        assert_eq!(
            flip_negation("No left pleural effusion."),
            "Left pleural effusion."
        );
        assert_eq!(
            flip_negation("There is no focal consolidation."),
            "There is focal consolidation."
        );
        assert_eq!(
            flip_negation("Heart size is enlarged."),
            "No heart size is enlarged."
        );
        assert_eq!(
            flip_negation("Lungs without edema."),
            "Lungs edema."
        );
    }

    #[test]
    fn laterality_swap_rules() {
        assert_eq!(
            swap_laterality("Left basilar opacity.").as_deref(),
            Some("Right basilar opacity.")
        );
        assert_eq!(
            swap_laterality("right and LEFT lungs").as_deref(),
            Some("left and RIGHT lungs")
        );
        assert_eq!(swap_laterality("Clear lungs."), None);
        // "leftward" is not a standalone token.
        assert_eq!(swap_laterality("Leftward shift."), None);
    }

    #[test]
    fn severity_swap_rules() {
        assert_eq!(
            swap_severity("Mild cardiomegaly with small effusion.").as_deref(),
            Some("Severe cardiomegaly with small effusion.")
        );
        assert_eq!(
            swap_severity("A large mass.").as_deref(),
            Some("A small mass.")
        );
        assert_eq!(swap_severity("Clear lungs."), None);
    }

    #[test]
    fn entity_substitution_changes_the_mention() {
        let lex = lexicon();
        let mut rng = study_rng(7, "s1");
        let out = substitute_entity("Findings suggest pneumonia.", &lex, &mut rng).unwrap();
        assert_ne!(out, "Findings suggest pneumonia.");
        assert!(!out.contains("pneumonia"));
        assert!(out.contains("pleural effusion") || out.contains("cardiomegaly"));
    }

    #[test]
    fn substitution_skips_codes_sharing_the_surface() {
        let lex = lexicon();
        // "effusion" is a synonym of pleural effusion; its candidates must
        // exclude the pleural effusion entry itself.
        let candidates = substitution_candidates("effusion", &lex);
        assert_eq!(candidates, vec!["cardiomegaly", "pneumonia"]);
    }

    #[test]
    fn zero_probability_never_corrupts() {
        let lex = lexicon();
        let r = report("Mild cardiomegaly. No pleural effusion.");
        for seed in 0..50 {
            let (out, outcome) = inject_error(&r, seed, 0.0, &lex).unwrap();
            assert_eq!(out, r);
            assert_eq!(outcome, InjectionOutcome::Clean);
            assert_eq!(outcome.label(), "N");
        }
    }

    #[test]
    fn certain_probability_always_corrupts_one_sentence() {
        let lex = lexicon();
        let r = report("Mild cardiomegaly. No pleural effusion. The bones are intact.");
        for seed in 0..50 {
            let (out, outcome) = inject_error(&r, seed, 1.0, &lex).unwrap();
            let InjectionOutcome::Corrupted(inj) = &outcome else {
                panic!("seed {seed} was clean at p = 1");
            };
            assert_eq!(outcome.label(), "Y");
            assert_ne!(out.findings, r.findings);
            assert_eq!(inj.original, r.findings);
            assert_eq!(inj.corrupted, out.findings);

            let before = text::split_sentences(&r.findings);
            let after = text::split_sentences(&out.findings);
            assert_eq!(before.len(), after.len());
            let changed: Vec<usize> = (0..before.len())
                .filter(|&i| before[i].core(&r.findings) != after[i].core(&out.findings))
                .collect();
            assert_eq!(changed, vec![inj.sentence_index], "seed {seed}");
            // Both phenotype sentences are eligible; the plain-bones one is not.
            assert!(inj.sentence_index < 2, "seed {seed}");
        }
    }

    #[test]
    fn fallback_to_any_sentence_without_phenotype_terms() {
        let lex = lexicon();
        let r = report("The bones are intact.");
        let (out, outcome) = inject_error(&r, 3, 1.0, &lex).unwrap();
        assert!(matches!(outcome, InjectionOutcome::Corrupted(_)));
        assert_ne!(out.findings, r.findings);
    }

    #[test]
    fn deterministic_in_seed_and_study() {
        let lex = lexicon();
        let r = report("Mild cardiomegaly. No pleural effusion.");
        let a = inject_error(&r, 11, 0.7317, &lex).unwrap();
        let b = inject_error(&r, 11, 0.7317, &lex).unwrap();
        assert_eq!(a, b);

        let mut other = r.clone();
        other.study_id = "s2".to_string();
        let c = inject_error(&other, 11, 0.7317, &lex).unwrap();
        assert_eq!(c, inject_error(&other, 11, 0.7317, &lex).unwrap());

        // Across 100 seeds the two studies must not always agree on the
        // corrupt/clean coin; their streams are independent.
        let disagree = (0..100).any(|seed| {
            let ra = inject_error(&r, seed, 0.5, &lex).unwrap().1 == InjectionOutcome::Clean;
            let rb = inject_error(&other, seed, 0.5, &lex).unwrap().1 == InjectionOutcome::Clean;
            ra != rb
        });
        assert!(disagree);
    }

    #[test]
    fn spec_negation_example_is_reachable() {
        let lex = lexicon();
        let r = report("No left pleural effusion.");
        let mut seen = false;
        for seed in 0..200 {
            let (out, outcome) = inject_error(&r, seed, 1.0, &lex).unwrap();
            if let InjectionOutcome::Corrupted(inj) = outcome {
                if inj.error_kind == ErrorKind::NegationFlip {
                    assert_eq!(out.findings, "Left pleural effusion.");
                    seen = true;
                    break;
                }
            }
        }
        assert!(seen, "negation flip never drawn in 200 seeds");
    }

    #[test]
    fn empty_findings_is_an_error() {
        let lex = lexicon();
        assert_eq!(
            inject_error(&report("   "), 1, 1.0, &lex),
            Err(TaskError::NoSentences)
        );
    }

    #[test]
    fn corruption_rate_tracks_probability() {
        let lex = lexicon();
        let mut corrupted = 0u32;
        let n = 1000;
        for i in 0..n {
            let mut r = report("Mild cardiomegaly. No pleural effusion.");
            r.study_id = format!("study-{i:04}");
            let (_, outcome) = inject_error(&r, 42, 0.7317, &lex).unwrap();
            if outcome.label() == "Y" {
                corrupted += 1;
            }
        }
        let rate = corrupted as f64 / n as f64;
        assert!((rate - 0.7317).abs() < 0.05, "rate {rate}");
    }
}
