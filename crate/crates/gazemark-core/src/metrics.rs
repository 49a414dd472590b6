//! Scoring: ROUGE-L for generation tasks, accuracy for classification
//! tasks, and micro/macro precision-recall-F1 for diagnosis sets, plus the
//! final task-by-condition comparison report.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::task::TaskKind;
use crate::text;

/// ROUGE tokenization: lowercase, split on non-alphanumeric runs, drop
/// empties ("x-ray" becomes ["x", "ray"]).
pub fn tokenize(s: &str) -> Vec<String> {
    text::words(s)
}

/// Longest-common-subsequence length by two-row dynamic programming.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L with balanced F (no stemming, no stopword
/// removal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };
}

/// ROUGE-L of a candidate against one reference. Either side tokenizing to
/// empty scores zero instead of erroring: empty model output is a bad
/// answer, not a crash.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return RougeScore::ZERO;
    }
    let lcs = lcs_length(&cand, &refr) as f64;
    let precision = lcs / cand.len() as f64;
    let recall = lcs / refr.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f1 }
}

/// Set-based diagnosis score with the underlying counts preserved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdxScore {
    pub n_correct: u64,
    pub n_predicted: u64,
    pub n_gold: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Whether diagnosis P/R/F1 divides corpus-level counts or averages
/// per-study ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DdxAggregation {
    Micro,
    Macro,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Micro-aggregated diagnosis score: corpus-level correct/predicted/gold
/// counts, then one division each.
pub fn ddx_score(per_study: &[(BTreeSet<String>, BTreeSet<String>)]) -> DdxScore {
    ddx_score_with(per_study, DdxAggregation::Micro)
}

/// [`ddx_score`] with an explicit aggregation. Macro averages per-study
/// precision/recall/F1; the count fields stay corpus sums either way.
pub fn ddx_score_with(
    per_study: &[(BTreeSet<String>, BTreeSet<String>)],
    aggregation: DdxAggregation,
) -> DdxScore {
    let mut n_correct = 0u64;
    let mut n_predicted = 0u64;
    let mut n_gold = 0u64;
    let mut p_sum = 0.0f64;
    let mut r_sum = 0.0f64;
    let mut f_sum = 0.0f64;
    for (pred, gold) in per_study {
        let correct = pred.intersection(gold).count() as u64;
        n_correct += correct;
        n_predicted += pred.len() as u64;
        n_gold += gold.len() as u64;
        let p = ratio(correct, pred.len() as u64);
        let r = ratio(correct, gold.len() as u64);
        p_sum += p;
        r_sum += r;
        f_sum += f1_of(p, r);
    }
    let (precision, recall, f1) = match aggregation {
        DdxAggregation::Micro => {
            let p = ratio(n_correct, n_predicted);
            let r = ratio(n_correct, n_gold);
            (p, r, f1_of(p, r))
        }
        DdxAggregation::Macro => {
            let n = per_study.len() as f64;
            if n == 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                (p_sum / n, r_sum / n, f_sum / n)
            }
        }
    };
    DdxScore { n_correct, n_predicted, n_gold, precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot score an empty sample")]
    EmptySample,
}

/// Fraction of pairs whose two sides compare equal. Callers normalize
/// first; an unparseable extraction never equals a gold label.
pub fn accuracy<T: PartialEq>(pairs: &[(T, T)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let correct = pairs.iter().filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Round to two decimals, half away from zero.
pub fn round2(v: f64) -> f64 {
    libm::floor(v * 100.0 + 0.5) / 100.0
}

/// One scored task-condition cell. `score` is the task metric times 100,
/// rounded to two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub score: f64,
    pub n_instances: usize,
    pub n_unparseable: usize,
}

/// A report cell is either scored or explicitly skipped; absence is never
/// implicit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReportCell {
    Scored(CellScore),
    Skipped,
}

impl ReportCell {
    pub fn score(&self) -> Option<f64> {
        match self {
            ReportCell::Scored(c) => Some(c.score),
            ReportCell::Skipped => None,
        }
    }
}

/// Both condition cells for one task. `gaze_improved` mirrors the
/// bold-when-better presentation: set only when both cells are scored and
/// the gaze score is strictly higher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub no_gaze: ReportCell,
    pub gaze: ReportCell,
    pub gaze_improved: bool,
}

/// The full task-by-condition comparison.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: BTreeMap<TaskKind, TaskRow>,
}

/// Assemble rows from per-task (no_gaze, gaze) cell scores; `None` marks a
/// condition that produced no scoreable exchanges.
pub fn assemble_report(
    cells: BTreeMap<TaskKind, (Option<CellScore>, Option<CellScore>)>,
) -> MetricsReport {
    let rows = cells
        .into_iter()
        .map(|(kind, (no_gaze, gaze))| {
            let improved = match (&no_gaze, &gaze) {
                (Some(n), Some(g)) => g.score > n.score,
                _ => false,
            };
            let to_cell = |c: Option<CellScore>| c.map_or(ReportCell::Skipped, ReportCell::Scored);
            (
                kind,
                TaskRow {
                    no_gaze: to_cell(no_gaze),
                    gaze: to_cell(gaze),
                    gaze_improved: improved,
                },
            )
        })
        .collect();
    MetricsReport { rows }
}

impl MetricsReport {
    /// Markdown rendering: one score table (gaze cells in bold where they
    /// beat no-gaze) plus an instance-count table.
    pub fn to_markdown(&self) -> String {
        use core::fmt::Write;

        let mut md = String::new();
        md.push_str("# Evaluation Report\n\n");
        md.push_str("| Task | Metric | No Gaze | Gaze |\n");
        md.push_str("|------|--------|---------|------|\n");
        for (kind, row) in &self.rows {
            let no_gaze = match row.no_gaze.score() {
                Some(s) => alloc::format!("{s:.2}"),
                None => String::from("n/a"),
            };
            let gaze = match row.gaze.score() {
                Some(s) if row.gaze_improved => alloc::format!("**{s:.2}**"),
                Some(s) => alloc::format!("{s:.2}"),
                None => String::from("n/a"),
            };
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                kind.name(),
                kind.metric_label(),
                no_gaze,
                gaze
            );
        }
        md.push_str("\nBold gaze cells beat the no-gaze condition.\n");
        md.push_str("\n## Instances\n\n");
        md.push_str("| Task | Condition | Scored | Unparseable |\n");
        md.push_str("|------|-----------|--------|-------------|\n");
        for (kind, row) in &self.rows {
            for (label, cell) in [("No Gaze", &row.no_gaze), ("Gaze", &row.gaze)] {
                let _ = match cell {
                    ReportCell::Scored(c) => writeln!(
                        md,
                        "| {} | {} | {} | {} |",
                        kind.name(),
                        label,
                        c.n_instances,
                        c.n_unparseable
                    ),
                    ReportCell::Skipped => writeln!(
                        md,
                        "| {} | {} | skipped | skipped |",
                        kind.name(),
                        label
                    ),
                };
            }
        }
        md
    }
}
