//! Shared text utilities: normalization, edit-distance similarity, and
//! sentence segmentation for radiology report text.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::collections::BTreeSet;

/// Lowercase `text` and map every non-alphanumeric character to a space,
/// collapsing runs of spaces. The result is a single-space-separated
/// token string ("No acute disease." -> "no acute disease").
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
        } else {
            pending_space = true;
        }
    }
    out
}

/// Normalized word tokens of `text` (lowercase, alphanumeric runs only).
pub fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized edit similarity: `(max_len - distance) / max_len` over
/// character counts. Two empty strings are identical (1.0).
///
/// Computed as a single division so that an exact rational like 4/5
/// compares equal to the literal threshold 0.8.
pub fn similarity(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let max = la.max(lb);
    if max == 0 {
        return 1.0;
    }
    let d = levenshtein(a, b);
    (max - d) as f64 / max as f64
}

/// Token-set similarity in the style of fuzzy token_set_ratio: compare the
/// sorted token intersection against each side's full sorted token string
/// and take the best edit similarity of the three pairings.
pub fn token_set_similarity(a: &str, b: &str) -> f64 {
    let ta: BTreeSet<String> = words(a).into_iter().collect();
    let tb: BTreeSet<String> = words(b).into_iter().collect();
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let inter: Vec<&str> = ta.intersection(&tb).map(|s| s.as_str()).collect();
    let a_only: Vec<&str> = ta.difference(&tb).map(|s| s.as_str()).collect();
    let b_only: Vec<&str> = tb.difference(&ta).map(|s| s.as_str()).collect();

    let joined = |head: &[&str], tail: &[&str]| -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(head.len() + tail.len());
        parts.extend_from_slice(head);
        parts.extend_from_slice(tail);
        parts.join(" ")
    };
    let s_inter = joined(&inter, &[]);
    let s_a = joined(&inter, &a_only);
    let s_b = joined(&inter, &b_only);

    similarity(&s_inter, &s_a)
        .max(similarity(&s_inter, &s_b))
        .max(similarity(&s_a, &s_b))
}

/// A sentence as a byte range into the source text. Spans include the
/// terminator and any trailing whitespace, so concatenating all spans in
/// order reproduces the source exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    /// The sentence text without trailing whitespace.
    pub fn core<'t>(&self, text: &'t str) -> &'t str {
        text[self.start..self.end].trim_end()
    }
}

/// Abbreviations after which a period does not end a sentence.
const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "vs.", "e.g.", "i.e.", "etc.", "a.m.", "p.m.",
];

/// Split `text` into sentence spans. Sentences end at `.`, `!`, or `?`
/// followed by whitespace (or end of text), except after a guarded
/// abbreviation or a single-letter initial.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut iter = text.char_indices().peekable();

    while let Some((idx, ch)) = iter.next() {
        if ch != '.' && ch != '!' && ch != '?' {
            continue;
        }
        let after = idx + ch.len_utf8();
        let at_end = after >= bytes.len();
        let next_is_ws = text[after..].chars().next().is_some_and(char::is_whitespace);
        if !at_end && !next_is_ws {
            continue;
        }
        if ch == '.' && is_guarded_abbreviation(text, start, after) {
            continue;
        }
        // Consume the trailing whitespace run into this span.
        let mut end = after;
        while end < bytes.len() {
            match text[end..].chars().next() {
                Some(w) if w.is_whitespace() => end += w.len_utf8(),
                _ => break,
            }
        }
        if !text[start..end].trim().is_empty() {
            spans.push(SentenceSpan { start, end });
        }
        start = end;
        while iter.peek().is_some_and(|&(i, _)| i < end) {
            iter.next();
        }
    }
    if start < bytes.len() && !text[start..].trim().is_empty() {
        spans.push(SentenceSpan { start, end: bytes.len() });
    }
    spans
}

fn is_guarded_abbreviation(text: &str, sentence_start: usize, after_dot: usize) -> bool {
    // The non-whitespace run ending at the period, e.g. "Dr." or "a.m.".
    let head = &text[sentence_start..after_dot];
    let word_start = head
        .char_indices()
        .rev()
        .find(|&(_, c)| c.is_whitespace())
        .map(|(i, c)| sentence_start + i + c.len_utf8())
        .unwrap_or(sentence_start);
    let word = &text[word_start..after_dot];
    let lower: String = word.chars().flat_map(char::to_lowercase).collect();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    // Single-letter initial such as "J." in "J. Smith".
    let mut chars = word.chars();
    matches!((chars.next(), chars.next(), chars.next()), (Some(c), Some('.'), None) if c.is_alphabetic())
}

/// Byte range of the first case-insensitive, word-boundary occurrence of
/// `term` in `haystack`. Matching is ASCII case-insensitive; a boundary is
/// a non-alphanumeric character or the text edge.
pub fn find_term(haystack: &str, term: &str) -> Option<(usize, usize)> {
    if term.is_empty() || term.len() > haystack.len() {
        return None;
    }
    let hb = haystack.as_bytes();
    let tb = term.as_bytes();
    for (idx, _) in haystack.char_indices() {
        if idx + tb.len() > hb.len() {
            break;
        }
        if !hb[idx..idx + tb.len()].eq_ignore_ascii_case(tb) {
            continue;
        }
        let start_ok = idx == 0
            || haystack[..idx]
                .chars()
                .next_back()
                .is_some_and(|c| !c.is_alphanumeric());
        let end = idx + tb.len();
        let end_ok = end == hb.len()
            || haystack[end..]
                .chars()
                .next()
                .is_some_and(|c| !c.is_alphanumeric());
        if start_ok && end_ok {
            return Some((idx, end));
        }
    }
    None
}

/// Whether `term` occurs in `haystack` at word boundaries (ASCII
/// case-insensitive).
pub fn contains_term(haystack: &str, term: &str) -> bool {
    find_term(haystack, term).is_some()
}
