//! Task instance construction for the five clinical benchmarks.
//!
//! GEN writes a findings section from the image alone, SUM condenses
//! findings into an impression, ERR classifies a possibly corrupted report
//! as erroneous or not, DDX lists likely diagnoses, VQA answers a short
//! clinical question. Builders are pure: identical inputs produce
//! byte-identical instances.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corrupt::InjectionOutcome;

/// The five benchmark tasks, in report-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Gen,
    Sum,
    Err,
    Ddx,
    Vqa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Gen,
        TaskKind::Sum,
        TaskKind::Err,
        TaskKind::Ddx,
        TaskKind::Vqa,
    ];

    /// Lowercase identifier used in instance ids and file names.
    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::Gen => "gen",
            TaskKind::Sum => "sum",
            TaskKind::Err => "err",
            TaskKind::Ddx => "ddx",
            TaskKind::Vqa => "vqa",
        }
    }

    /// Display name as used in reports ("GEN", "SUM", ...).
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Gen => "GEN",
            TaskKind::Sum => "SUM",
            TaskKind::Err => "ERR",
            TaskKind::Ddx => "DDX",
            TaskKind::Vqa => "VQA",
        }
    }

    /// The metric each task is scored with.
    pub fn metric_label(self) -> &'static str {
        match self {
            TaskKind::Gen | TaskKind::Sum => "ROUGE-L",
            TaskKind::Err | TaskKind::Vqa => "Accuracy",
            TaskKind::Ddx => "F1",
        }
    }
}

impl core::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        match s.to_ascii_lowercase().as_str() {
            "gen" => Ok(TaskKind::Gen),
            "sum" => Ok(TaskKind::Sum),
            "err" => Ok(TaskKind::Err),
            "ddx" => Ok(TaskKind::Ddx),
            "vqa" => Ok(TaskKind::Vqa),
            _ => Err(TaskError::UnknownTask { got: s.to_string() }),
        }
    }
}

/// Input condition: the raw X-ray or the gaze-overlay render of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoGaze,
    Gaze,
}

impl Condition {
    pub const BOTH: [Condition; 2] = [Condition::NoGaze, Condition::Gaze];

    pub fn slug(self) -> &'static str {
        match self {
            Condition::NoGaze => "no_gaze",
            Condition::Gaze => "gaze",
        }
    }

    /// Display name as used in reports.
    pub fn name(self) -> &'static str {
        match self {
            Condition::NoGaze => "No Gaze",
            Condition::Gaze => "Gaze",
        }
    }
}

impl core::fmt::Display for Condition {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.slug())
    }
}

impl core::str::FromStr for Condition {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        match s.to_ascii_lowercase().as_str() {
            "no_gaze" | "no-gaze" | "nogaze" => Ok(Condition::NoGaze),
            "gaze" => Ok(Condition::Gaze),
            _ => Err(TaskError::UnknownCondition { got: s.to_string() }),
        }
    }
}

/// One radiology report: free-text findings plus the impression summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub study_id: String,
    pub findings: String,
    pub impression: String,
}

/// One question/answer pair tied to a study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub study_id: String,
    pub question: String,
    pub answer: String,
}

/// Train/eval study id partition. Disjointness is checked by
/// [`check_split`], not by construction.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: BTreeSet<String>,
    pub eval_ids: BTreeSet<String>,
}

/// Paths to the two renderings of one study's X-ray.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRefs {
    pub study_id: String,
    /// Raw grayscale image, the no-gaze condition input.
    pub raw: String,
    /// Heatmap overlay, the gaze condition input.
    pub overlay: String,
}

/// One prompt + gold reference, bound to both condition images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub instance_id: String,
    pub kind: TaskKind,
    pub study_id: String,
    pub image_ref: String,
    pub overlay_ref: String,
    pub prompt: String,
    pub reference: String,
}

impl TaskInstance {
    /// The image the given condition sends to the model.
    pub fn image_for(&self, condition: Condition) -> &str {
        match condition {
            Condition::NoGaze => &self.image_ref,
            Condition::Gaze => &self.overlay_ref,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("required field `{field}` is empty")]
    MissingField { field: &'static str },
    #[error("gold diagnosis set is empty")]
    EmptyGold,
    #[error("findings contain no sentences")]
    NoSentences,
    #[error("train and eval splits share {} id(s): {}", overlap.len(), overlap.join(", "))]
    SplitOverlap { overlap: Vec<String> },
    #[error("instance inputs disagree on study id: `{expected}` vs `{got}`")]
    StudyMismatch { expected: String, got: String },
    #[error("unknown task `{got}`")]
    UnknownTask { got: String },
    #[error("unknown condition `{got}`")]
    UnknownCondition { got: String },
    #[error("prompt template `{template}` is missing placeholder `{placeholder}`")]
    BadTemplate { template: &'static str, placeholder: &'static str },
}

/// Per-task prompt wording, versioned so runs record exactly what was sent.
///
/// `sum` must contain `{findings}`, `err` must contain `{report}`, and
/// `vqa` must contain `{question}`; the placeholder is replaced verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    pub gen: String,
    pub sum: String,
    pub err: String,
    pub ddx: String,
    pub vqa: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            version: "v1".to_string(),
            gen: "You are reading a chest X-ray. Write the Findings section of the \
                  radiology report, describing all notable observations in the image. \
                  Respond with the findings text only."
                .to_string(),
            sum: "You are reading a chest X-ray together with the Findings section of \
                  its radiology report.\n\nFindings: {findings}\n\nWrite the Impression \
                  section summarizing the key conclusions. Respond with the impression \
                  text only."
                .to_string(),
            err: "You are reading a chest X-ray and the findings section of its \
                  radiology report, which may contain an error.\n\nReport: {report}\n\n\
                  Does the report contain an error? Answer with a single letter: Y if \
                  an error is present, or N if the report is correct."
                .to_string(),
            ddx: "You are reading a chest X-ray. List the most likely diagnoses you \
                  would consider for this patient, separated by commas. Respond with \
                  the diagnosis names only."
                .to_string(),
            vqa: "You are reading a chest X-ray. {question}\nAnswer with a single \
                  short answer."
                .to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<(), TaskError> {
        for (template, text, placeholder) in [
            ("sum", &self.sum, "{findings}"),
            ("err", &self.err, "{report}"),
            ("vqa", &self.vqa, "{question}"),
        ] {
            if !text.contains(placeholder) {
                return Err(TaskError::BadTemplate { template, placeholder });
            }
        }
        Ok(())
    }
}

fn require(field: &'static str, value: &str) -> Result<(), TaskError> {
    if value.trim().is_empty() {
        return Err(TaskError::MissingField { field });
    }
    Ok(())
}

fn check_study(refs: &ImageRefs, study_id: &str) -> Result<(), TaskError> {
    if refs.study_id != study_id {
        return Err(TaskError::StudyMismatch {
            expected: study_id.to_string(),
            got: refs.study_id.clone(),
        });
    }
    Ok(())
}

fn instance(
    kind: TaskKind,
    instance_id: String,
    refs: &ImageRefs,
    prompt: String,
    reference: String,
) -> TaskInstance {
    TaskInstance {
        instance_id,
        kind,
        study_id: refs.study_id.clone(),
        image_ref: refs.raw.clone(),
        overlay_ref: refs.overlay.clone(),
        prompt,
        reference,
    }
}

/// Findings generation from the image alone; reference = gold findings.
/// The prompt never embeds the reference.
pub fn build_gen(
    report: &Report,
    refs: &ImageRefs,
    templates: &PromptTemplates,
) -> Result<TaskInstance, TaskError> {
    check_study(refs, &report.study_id)?;
    require("findings", &report.findings)?;
    Ok(instance(
        TaskKind::Gen,
        format!("{}-gen", report.study_id),
        refs,
        templates.gen.clone(),
        report.findings.clone(),
    ))
}

/// Impression summarization given the findings verbatim; reference = gold
/// impression.
pub fn build_sum(
    report: &Report,
    refs: &ImageRefs,
    templates: &PromptTemplates,
) -> Result<TaskInstance, TaskError> {
    check_study(refs, &report.study_id)?;
    require("findings", &report.findings)?;
    require("impression", &report.impression)?;
    Ok(instance(
        TaskKind::Sum,
        format!("{}-sum", report.study_id),
        refs,
        templates.sum.replace("{findings}", &report.findings),
        report.impression.clone(),
    ))
}

/// Error detection over a possibly corrupted report; reference = "Y" iff
/// the injection actually changed the findings.
pub fn build_err(
    corrupted: &Report,
    refs: &ImageRefs,
    outcome: &InjectionOutcome,
    templates: &PromptTemplates,
) -> Result<TaskInstance, TaskError> {
    check_study(refs, &corrupted.study_id)?;
    require("findings", &corrupted.findings)?;
    Ok(instance(
        TaskKind::Err,
        format!("{}-err", corrupted.study_id),
        refs,
        templates.err.replace("{report}", &corrupted.findings),
        outcome.label().to_string(),
    ))
}

/// Differential diagnosis from the image alone; reference = the gold ICD
/// codes, deduplicated and sorted so input order never matters.
pub fn build_ddx(
    gold_codes: &[String],
    refs: &ImageRefs,
    templates: &PromptTemplates,
) -> Result<TaskInstance, TaskError> {
    let canonical: BTreeSet<&str> = gold_codes
        .iter()
        .map(|c| c.trim())
        .filter(|c| !c.is_empty())
        .collect();
    if canonical.is_empty() {
        return Err(TaskError::EmptyGold);
    }
    let reference = canonical.into_iter().collect::<Vec<_>>().join(", ");
    Ok(instance(
        TaskKind::Ddx,
        format!("{}-ddx", refs.study_id),
        refs,
        templates.ddx.clone(),
        reference,
    ))
}

/// Visual question answering; reference = gold short answer. Instance ids
/// hash the question so one study can carry several questions.
pub fn build_vqa(
    record: &VqaRecord,
    refs: &ImageRefs,
    templates: &PromptTemplates,
) -> Result<TaskInstance, TaskError> {
    check_study(refs, &record.study_id)?;
    require("question", &record.question)?;
    require("answer", &record.answer)?;
    let digest = Sha256::digest(record.question.as_bytes());
    let tag = format!(
        "{:02x}{:02x}{:02x}{:02x}",
        digest[0], digest[1], digest[2], digest[3]
    );
    Ok(instance(
        TaskKind::Vqa,
        format!("{}-vqa-{}", record.study_id, tag),
        refs,
        templates.vqa.replace("{question}", &record.question),
        record.answer.clone(),
    ))
}

/// Reject any train/eval leakage before instances are built.
pub fn check_split(split: &DatasetSplit) -> Result<(), TaskError> {
    let overlap: Vec<String> = split
        .train_ids
        .intersection(&split.eval_ids)
        .cloned()
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(TaskError::SplitOverlap { overlap })
    }
}
