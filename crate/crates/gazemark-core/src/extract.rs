//! Turning raw model text into scoreable answers.
//!
//! Three extractors: anchored-plus-fuzzy Y/N classification for error
//! detection, diagnosis mention scanning and ICD linking for differential
//! diagnosis, and short-answer normalization for VQA. Neural recognition
//! and embedding are pluggable behind traits; the built-in fallbacks are
//! deterministic lexicon algorithms.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::text;

/// Verdict for the error-detection task. `Unparseable` is a value, not an
/// error: downstream scoring treats it as a wrong answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YnAnswer {
    Yes,
    No,
    Unparseable,
}

/// Phrases that assert an error is present / absent. Multi-word keys match
/// as token sequences over the normalized response.
const AFFIRMATIVE_KEYS: &[&str] = &["y", "yes", "error", "errors present", "incorrect"];
const NEGATIVE_KEYS: &[&str] = &["n", "no", "no error", "correct", "accurate"];

/// Fuzzy-match threshold for [`extract_yn`].
pub const DEFAULT_YN_THRESHOLD: f64 = 0.8;

fn keyed_answers() -> impl Iterator<Item = (&'static str, YnAnswer)> {
    AFFIRMATIVE_KEYS
        .iter()
        .map(|&k| (k, YnAnswer::Yes))
        .chain(NEGATIVE_KEYS.iter().map(|&k| (k, YnAnswer::No)))
}

/// [`extract_yn_with_threshold`] at the default 0.8 threshold.
pub fn extract_yn(response: &str) -> YnAnswer {
    extract_yn_with_threshold(response, DEFAULT_YN_THRESHOLD)
}

/// Classify a free-text answer as Yes/No.
///
/// Pass 1 scans the normalized token stream for exact key phrases; the
/// earliest match wins and, at equal position, the longest. Pass 2 slides
/// a window per key over the tokens and fuzzy-matches on edit-distance
/// ratio, keeping the best of (similarity, earliest, longest key); an
/// exact tie across polarities resolves to No. Anything below `threshold`
/// is `Unparseable`. Total: never panics, any input yields a value.
pub fn extract_yn_with_threshold(response: &str, threshold: f64) -> YnAnswer {
    let tokens = text::words(response);
    if tokens.is_empty() {
        return YnAnswer::Unparseable;
    }

    // Pass 1: exact anchored token sequences.
    let mut exact: Option<(usize, usize, YnAnswer)> = None; // (pos, key_tokens, answer)
    for (key, answer) in keyed_answers() {
        let key_tokens: Vec<&str> = key.split(' ').collect();
        if key_tokens.len() > tokens.len() {
            continue;
        }
        for pos in 0..=tokens.len() - key_tokens.len() {
            if tokens[pos..pos + key_tokens.len()]
                .iter()
                .zip(&key_tokens)
                .all(|(t, k)| t == k)
            {
                let better = match exact {
                    None => true,
                    Some((p, n, _)) => pos < p || (pos == p && key_tokens.len() > n),
                };
                if better {
                    exact = Some((pos, key_tokens.len(), answer));
                }
                break; // only the earliest occurrence of this key matters
            }
        }
    }
    if let Some((_, _, answer)) = exact {
        return answer;
    }

    // Pass 2: fuzzy windows. Rank by similarity, then position, then key
    // length in characters; a full tie is resolved negatively.
    let mut best: Option<(f64, usize, usize, YnAnswer)> = None;
    for (key, answer) in keyed_answers() {
        let key_tokens = key.split(' ').count();
        if key_tokens > tokens.len() {
            continue;
        }
        let key_chars = key.chars().count();
        for pos in 0..=tokens.len() - key_tokens {
            let window = tokens[pos..pos + key_tokens].join(" ");
            let window_chars = window.chars().count();
            let max_len = window_chars.max(key_chars);
            // A length gap alone can put the ratio under threshold.
            if max_len > 0
                && ((max_len - window_chars.abs_diff(key_chars)) as f64) / (max_len as f64)
                    < threshold
            {
                continue;
            }
            let sim = text::similarity(&window, key);
            if sim < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((s, p, kc, a)) => {
                    (sim > s)
                        || (sim == s && pos < p)
                        || (sim == s && pos == p && key_chars > kc)
                        || (sim == s
                            && pos == p
                            && key_chars == kc
                            && a == YnAnswer::Yes
                            && answer == YnAnswer::No)
                }
            };
            if better {
                best = Some((sim, pos, key_chars, answer));
            }
        }
    }
    best.map_or(YnAnswer::Unparseable, |(_, _, _, a)| a)
}

/// One diagnosis entry. Names are stored lowercase; the optional
/// embedding must be unit-norm and share a dimension across the lexicon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub icd_code: String,
    pub canonical_name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LexiconError {
    #[error("lexicon entry has an empty icd_code")]
    EmptyCode,
    #[error("duplicate icd_code `{code}`")]
    DuplicateCode { code: String },
    #[error("entry `{code}` has an empty canonical name")]
    EmptyName { code: String },
    #[error("entry `{code}` embedding has {got} dims, lexicon uses {expected}")]
    EmbeddingDimensionMismatch { code: String, expected: usize, got: usize },
    #[error("entry `{code}` embedding norm {norm} is not 1 within 1e-6")]
    EmbeddingNotUnitNorm { code: String, norm: f64 },
}

/// Validated, immutable diagnosis vocabulary.
///
/// Entries are kept sorted by icd_code so every scan and tie-break below
/// is order-independent of the input file.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisLexicon {
    entries: Vec<LexiconEntry>,
    /// normalized name or synonym -> codes that use it
    name_index: BTreeMap<String, BTreeSet<String>>,
    /// distinct lowercase surface terms for the scanner
    terms: Vec<String>,
}

fn l2_norm(v: &[f32]) -> f64 {
    libm::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum())
}

impl DiagnosisLexicon {
    pub fn new(mut entries: Vec<LexiconEntry>) -> Result<Self, LexiconError> {
        let mut dim: Option<usize> = None;
        for e in &mut entries {
            e.icd_code = e.icd_code.trim().to_string();
            if e.icd_code.is_empty() {
                return Err(LexiconError::EmptyCode);
            }
            e.canonical_name = e.canonical_name.trim().to_lowercase();
            if e.canonical_name.is_empty() {
                return Err(LexiconError::EmptyName { code: e.icd_code.clone() });
            }
            e.synonyms = e
                .synonyms
                .iter()
                .map(|s| s.trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect();
            if let Some(v) = &e.embedding {
                let expected = *dim.get_or_insert(v.len());
                if v.len() != expected {
                    return Err(LexiconError::EmbeddingDimensionMismatch {
                        code: e.icd_code.clone(),
                        expected,
                        got: v.len(),
                    });
                }
                let norm = l2_norm(v);
                if libm::fabs(norm - 1.0) > 1e-6 {
                    return Err(LexiconError::EmbeddingNotUnitNorm {
                        code: e.icd_code.clone(),
                        norm,
                    });
                }
            }
        }
        entries.sort_by(|a, b| a.icd_code.cmp(&b.icd_code));
        if let Some(w) = entries.windows(2).find(|w| w[0].icd_code == w[1].icd_code) {
            return Err(LexiconError::DuplicateCode { code: w[0].icd_code.clone() });
        }

        let mut name_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut term_set: BTreeSet<String> = BTreeSet::new();
        for e in &entries {
            for name in core::iter::once(&e.canonical_name).chain(&e.synonyms) {
                let norm = text::normalize(name);
                if !norm.is_empty() {
                    name_index.entry(norm).or_default().insert(e.icd_code.clone());
                }
                term_set.insert(name.clone());
            }
        }
        Ok(DiagnosisLexicon {
            entries,
            name_index,
            terms: term_set.into_iter().collect(),
        })
    }

    /// Entries in icd_code order.
    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Codes whose canonical name or synonyms normalize to `normalized`.
    pub fn codes_for_name(&self, normalized: &str) -> BTreeSet<String> {
        self.name_index.get(normalized).cloned().unwrap_or_default()
    }

    /// Shared embedding dimension, when any entry carries a vector.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.entries.iter().find_map(|e| e.embedding.as_ref().map(Vec::len))
    }
}

/// A recognized diagnosis mention: byte offsets into the scanned text plus
/// the verbatim surface. Matches the wire shape of the NER service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("entity recognizer failed: {message}")]
pub struct RecognizerError {
    pub message: String,
}

/// Source of diagnosis mentions: either the built-in lexicon scanner or an
/// external neural recognizer speaking the span wire format.
pub trait MentionRecognizer {
    fn recognize(&self, response: &str) -> Result<Vec<MentionSpan>, RecognizerError>;
}

/// The deterministic fallback recognizer: [`scan_mentions`] as a trait object.
pub struct LexiconScanner<'a> {
    pub lexicon: &'a DiagnosisLexicon,
}

impl MentionRecognizer for LexiconScanner<'_> {
    fn recognize(&self, response: &str) -> Result<Vec<MentionSpan>, RecognizerError> {
        Ok(scan_mentions(response, self.lexicon))
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Whether `term` matches `hay[at..]` (ASCII case-insensitive) ending on a
/// word boundary; returns the end offset.
fn term_matches_at(hay: &str, at: usize, term: &str) -> Option<usize> {
    let rest = &hay[at..];
    if rest.len() < term.len() || !rest.is_char_boundary(term.len()) {
        return None;
    }
    if !rest[..term.len()].eq_ignore_ascii_case(term) {
        return None;
    }
    let end = at + term.len();
    if hay[end..].chars().next().is_some_and(is_word_char) {
        return None;
    }
    Some(end)
}

/// Greedy longest-match scan for lexicon terms, left to right, emitting
/// non-overlapping word-boundary spans whose surfaces appear verbatim in
/// the input. Plural or fused forms ("pneumonias") do not match.
pub fn scan_mentions(response: &str, lexicon: &DiagnosisLexicon) -> Vec<MentionSpan> {
    let mut mentions = Vec::new();
    let mut at = 0;
    let mut prev_is_word = false;
    while at < response.len() {
        let ch = match response[at..].chars().next() {
            Some(c) => c,
            None => break,
        };
        if !is_word_char(ch) || prev_is_word {
            prev_is_word = is_word_char(ch);
            at += ch.len_utf8();
            continue;
        }
        // Word start: take the longest term matching here, if any.
        let mut best_end = None;
        for term in &lexicon.terms {
            if let Some(end) = term_matches_at(response, at, term) {
                if best_end.is_none_or(|b| end > b) {
                    best_end = Some(end);
                }
            }
        }
        match best_end {
            Some(end) => {
                mentions.push(MentionSpan {
                    start: at,
                    end,
                    surface: response[at..end].to_string(),
                });
                at = end;
                prev_is_word = true;
            }
            None => {
                prev_is_word = true;
                at += ch.len_utf8();
            }
        }
    }
    mentions
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("embedding service failed: {message}")]
pub struct EmbedError {
    pub message: String,
}

/// Maps short texts to embedding vectors; the external service client
/// implements this, and tests substitute deterministic tables.
pub trait Embedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// How a mention was linked to its code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkMethod {
    Exact,
    Fuzzy,
    Embedding,
}

/// One mention resolved to an ICD code at `score` >= the linking threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedDiagnosis {
    pub mention: MentionSpan,
    pub icd_code: String,
    pub score: f64,
    pub method: LinkMethod,
}

/// Linked mentions in input order plus the deduplicated code set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkOutcome {
    pub links: Vec<LinkedDiagnosis>,
    pub codes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinkError {
    #[error("linking threshold {tau} outside (0, 1]")]
    InvalidTau { tau: f64 },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("embedding service returned {got} vectors for {expected} texts")]
    EmbedCountMismatch { expected: usize, got: usize },
    #[error("embedding service returned {got} dims, lexicon uses {expected}")]
    EmbedDimensionMismatch { expected: usize, got: usize },
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Track the best (score, code) pair; ties go to the smaller code.
fn prefer(best: &mut Option<(f64, String)>, score: f64, code: &str) {
    let better = match best {
        None => true,
        Some((s, c)) => score > *s || (score == *s && code < c.as_str()),
    };
    if better {
        *best = Some((score, code.to_string()));
    }
}

/// Resolve mentions to ICD codes.
///
/// Per mention: an exact (normalized) name hit links at score 1; otherwise
/// the embedding path runs when an embedder is supplied and the lexicon
/// carries vectors, linking at the best cosine if it clears `tau`;
/// otherwise token-set similarity against every name, again gated by
/// `tau`. Mentions that clear nothing are dropped. Score ties across
/// entries resolve to the lexicographically smallest icd_code.
pub fn link_mentions(
    mentions: &[MentionSpan],
    lexicon: &DiagnosisLexicon,
    embedder: Option<&dyn Embedder>,
    tau: f64,
) -> Result<LinkOutcome, LinkError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(LinkError::InvalidTau { tau });
    }
    let mut outcome = LinkOutcome::default();

    // Resolve every exact hit first so one batched embed call covers the rest.
    let mut pending: Vec<usize> = Vec::new();
    for (i, mention) in mentions.iter().enumerate() {
        let norm = text::normalize(&mention.surface);
        let codes = lexicon.codes_for_name(&norm);
        match codes.iter().next() {
            Some(code) => {
                outcome.links.push(LinkedDiagnosis {
                    mention: mention.clone(),
                    icd_code: code.clone(),
                    score: 1.0,
                    method: LinkMethod::Exact,
                });
            }
            None => pending.push(i),
        }
    }

    let lexicon_dim = lexicon.embedding_dim();
    let vectors: Option<Vec<Vec<f32>>> = match (embedder, lexicon_dim) {
        (Some(embedder), Some(dim)) if !pending.is_empty() => {
            let texts: Vec<String> =
                pending.iter().map(|&i| mentions[i].surface.clone()).collect();
            let vectors = embedder.embed(&texts)?;
            if vectors.len() != texts.len() {
                return Err(LinkError::EmbedCountMismatch {
                    expected: texts.len(),
                    got: vectors.len(),
                });
            }
            if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
                return Err(LinkError::EmbedDimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            Some(vectors)
        }
        _ => None,
    };

    for (slot, &i) in pending.iter().enumerate() {
        let mention = &mentions[i];
        let mut link: Option<LinkedDiagnosis> = None;

        if let Some(vectors) = &vectors {
            let mut best: Option<(f64, String)> = None;
            for entry in lexicon.entries() {
                if let Some(e) = &entry.embedding {
                    prefer(&mut best, cosine(&vectors[slot], e), &entry.icd_code);
                }
            }
            if let Some((score, code)) = best {
                if score >= tau {
                    link = Some(LinkedDiagnosis {
                        mention: mention.clone(),
                        icd_code: code,
                        score,
                        method: LinkMethod::Embedding,
                    });
                }
            }
        }

        if link.is_none() {
            let mut best: Option<(f64, String)> = None;
            for (name, codes) in &lexicon.name_index {
                let score = text::token_set_similarity(&mention.surface, name);
                for code in codes {
                    prefer(&mut best, score, code);
                }
            }
            if let Some((score, code)) = best {
                if score >= tau {
                    link = Some(LinkedDiagnosis {
                        mention: mention.clone(),
                        icd_code: code,
                        score,
                        method: LinkMethod::Fuzzy,
                    });
                }
            }
        }

        if let Some(link) = link {
            outcome.links.push(link);
        }
    }

    outcome.links.sort_by_key(|l| l.mention.start);
    outcome.codes = outcome.links.iter().map(|l| l.icd_code.clone()).collect();
    Ok(outcome)
}

/// Articles dropped by VQA normalization.
const ARTICLES: &[&str] = &["a", "an", "the"];

/// Canonicalize a short VQA answer: lowercase, strip punctuation and
/// articles, collapse whitespace, and fold bare yes/no variants
/// ("yeah", "correct", "nope") onto "yes"/"no".
pub fn vqa_normalize(answer: &str) -> String {
    let kept: Vec<String> = text::words(answer)
        .into_iter()
        .filter(|w| !ARTICLES.contains(&w.as_str()))
        .collect();
    let joined = kept.join(" ");
    match joined.as_str() {
        "yes" | "yeah" | "correct" => "yes".to_string(),
        "no" | "nope" => "no".to_string(),
        _ => joined,
    }
}
