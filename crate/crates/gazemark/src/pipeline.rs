//! The five pipeline stages behind the CLI subcommands.
//!
//! Stage order is render -> build -> run -> score; validate can run any
//! time and never writes. Every artifact write is atomic and skipped when
//! the bytes are already current, so rerunning a stage with unchanged
//! inputs changes nothing on disk. Failures split into validation errors
//! (bad config or inputs, exit 1) and runtime failures (endpoint or IO
//! trouble mid-run, exit 2, partial progress preserved).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gazemark_core::corrupt::{inject_error, ErrorInjection};
use gazemark_core::extract::{
    extract_yn_with_threshold, link_mentions, vqa_normalize, DiagnosisLexicon, Embedder,
    LexiconScanner, MentionRecognizer, YnAnswer,
};
use gazemark_core::gaze::{accumulate_heatmap, validate_recording};
use gazemark_core::metrics::{
    accuracy, assemble_report, ddx_score_with, rouge_l, round2, tokenize, CellScore,
    MetricsReport,
};
use gazemark_core::overlay::render_overlay;
use gazemark_core::task::{
    build_ddx, build_err, build_gen, build_sum, build_vqa, check_split, Condition, ImageRefs,
    Report, TaskInstance, TaskKind, VqaRecord,
};

use crate::cache::{cache_key, ExchangeCache};
use crate::client::{prompt_hash, VlmClient};
use crate::config::{LinkingConfig, OverlayConfig, RunConfig};
use crate::formats;
use crate::gaze_io::{self, GAZE_SAMPLE_RATE_HZ};
use crate::imaging;
use crate::services::{EmbedClient, NerClient, DEFAULT_SERVICE_TIMEOUT_SECS};

/// Marker for failures that should exit with the validation code rather
/// than the runtime one.
#[derive(Debug)]
pub struct ValidationFailure(pub String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

fn validation_error(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ValidationFailure(message.into()))
}

/// Which condition(s) a `run` invocation queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSelection {
    NoGaze,
    Gaze,
    Both,
}

impl ConditionSelection {
    pub fn conditions(self) -> Vec<Condition> {
        match self {
            ConditionSelection::NoGaze => vec![Condition::NoGaze],
            ConditionSelection::Gaze => vec![Condition::Gaze],
            ConditionSelection::Both => Condition::BOTH.to_vec(),
        }
    }
}

impl std::str::FromStr for ConditionSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "no_gaze" | "no-gaze" | "nogaze" => Ok(ConditionSelection::NoGaze),
            "gaze" => Ok(ConditionSelection::Gaze),
            "both" => Ok(ConditionSelection::Both),
            other => Err(format!(
                "unknown condition `{other}` (expected gaze, no_gaze, or both)"
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Run manifest

/// Stage summaries for one output directory, keyed to the config that
/// produced them. Deliberately timestamp-free so reruns are byte-stable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render: Option<RenderSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build: Option<BuildSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RenderSummary {
    pub images: usize,
    pub rendered: usize,
    pub up_to_date: usize,
    pub missing_gaze: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildSummary {
    /// Eval studies with both renders available.
    pub studies: usize,
    pub instances: BTreeMap<TaskKind, usize>,
    pub skipped: BTreeMap<TaskKind, usize>,
    /// Error-detection label split.
    pub corrupted: usize,
    pub clean: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub conditions: Vec<Condition>,
    pub requested: usize,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub cells_scored: usize,
    pub cells_skipped: usize,
}

/// Merge one stage's summary into the run manifest. A manifest written
/// under a different config hash is discarded rather than mixed.
fn update_run_manifest(
    cfg: &RunConfig,
    apply: impl FnOnce(&mut RunManifest),
) -> anyhow::Result<()> {
    let path = cfg.run_manifest_path();
    let hash = cfg.config_hash();
    let mut manifest: RunManifest = std::fs::read(&path)
        .ok()
        .and_then(|bytes| serde_json::from_slice(&bytes).ok())
        .filter(|m: &RunManifest| m.config_hash == hash)
        .unwrap_or_default();
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.config_hash = hash;
    apply(&mut manifest);
    formats::write_if_changed(&path, &formats::to_json_pretty(&manifest))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared input discovery

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Images in `dir` as (image_id, path), sorted by id. Two files that share
/// a stem would make instance building ambiguous, so that is an error.
fn list_images(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut out: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| validation_error(format!("cannot read image directory {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .with_context(|| format!("cannot list image directory {}", dir.display()))?
            .path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if let Some(previous) = out.insert(stem.to_string(), path.clone()) {
            return Err(validation_error(format!(
                "ambiguous image id `{stem}`: {} and {}",
                previous.display(),
                path.display()
            )));
        }
    }
    Ok(out.into_iter().collect())
}

fn find_gaze(dir: &Path, image_id: &str) -> Option<PathBuf> {
    for ext in ["csv", "json"] {
        let candidate = dir.join(format!("{image_id}.{ext}"));
        if candidate.is_file() {
            return Some(candidate);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// render

/// Per-overlay audit record written next to the PNG. `content_key` ties
/// the artifact to its exact inputs and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySidecar {
    pub image_id: String,
    pub content_key: String,
    pub width: u32,
    pub height: u32,
    pub c_max: u32,
    pub n_samples: u64,
    pub n_in_bounds: u64,
    pub n_dropped: u64,
    pub monotone_time: bool,
    pub params: OverlayConfig,
}

/// Length-prefixed hash of the raw image bytes, gaze bytes, and overlay
/// parameters; any change to any of them changes the key.
fn overlay_content_key(image_bytes: &[u8], gaze_bytes: &[u8], params: &OverlayConfig) -> String {
    let params_json = serde_json::to_vec(params).expect("overlay params serialize");
    let mut hasher = Sha256::new();
    for chunk in [image_bytes, gaze_bytes, params_json.as_slice()] {
        hasher.update((chunk.len() as u64).to_le_bytes());
        hasher.update(chunk);
    }
    hex::encode(hasher.finalize())
}

enum RenderOutcome {
    Rendered,
    UpToDate,
    MissingGaze,
}

fn render_one(
    cfg: &RunConfig,
    image_id: &str,
    image_path: &Path,
    overlays_dir: &Path,
) -> anyhow::Result<RenderOutcome> {
    let Some(gaze_path) = find_gaze(&cfg.paths.gaze, image_id) else {
        log::warn!("no gaze recording for `{image_id}`; skipping");
        return Ok(RenderOutcome::MissingGaze);
    };
    let image_bytes = std::fs::read(image_path)
        .with_context(|| format!("cannot read image {}", image_path.display()))?;
    let gaze_bytes = std::fs::read(&gaze_path)
        .with_context(|| format!("cannot read gaze file {}", gaze_path.display()))?;
    let content_key = overlay_content_key(&image_bytes, &gaze_bytes, &cfg.overlay);

    let png_path = overlays_dir.join(format!("{image_id}.png"));
    let sidecar_path = overlays_dir.join(format!("{image_id}.json"));
    if png_path.is_file() {
        if let Ok(sidecar) = formats::read_json::<OverlaySidecar>(&sidecar_path) {
            if sidecar.content_key == content_key {
                return Ok(RenderOutcome::UpToDate);
            }
        }
    }

    let gray = imaging::decode_gray(image_path)?;
    let recording = gaze_io::load_recording(&gaze_path, image_id, GAZE_SAMPLE_RATE_HZ)?;
    let validation = validate_recording(&recording, gray.width(), gray.height());
    if !validation.monotone_time {
        log::warn!("gaze timestamps for `{image_id}` are not non-decreasing");
    }
    let accumulation =
        accumulate_heatmap(&recording, gray.width(), gray.height(), cfg.overlay.cell_size);
    let rgb = render_overlay(&gray, &accumulation.grid, &cfg.overlay.to_spec())
        .with_context(|| format!("cannot render overlay for `{image_id}`"))?;
    let png = imaging::encode_png(&rgb)?;
    formats::write_atomic(&png_path, &png)?;

    let sidecar = OverlaySidecar {
        image_id: image_id.to_string(),
        content_key,
        width: gray.width(),
        height: gray.height(),
        c_max: accumulation.grid.max_count(),
        n_samples: validation.n_total,
        n_in_bounds: validation.n_in_bounds,
        n_dropped: accumulation.n_dropped,
        monotone_time: validation.monotone_time,
        params: cfg.overlay.clone(),
    };
    formats::write_atomic(&sidecar_path, &formats::to_json_pretty(&sidecar))?;
    Ok(RenderOutcome::Rendered)
}

/// Render a heatmap overlay for every image that has a gaze recording.
/// Up-to-date overlays (same image, gaze, and parameters) are left alone;
/// images without a recording are skipped with a warning.
pub fn cmd_render(cfg: &RunConfig) -> anyhow::Result<RenderSummary> {
    let overlays_dir = cfg.overlays_dir();
    std::fs::create_dir_all(&overlays_dir)
        .with_context(|| format!("cannot create {}", overlays_dir.display()))?;
    let images = list_images(&cfg.paths.images)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.render.workers)
        .build()
        .context("cannot build render pool")?;
    let results: Vec<anyhow::Result<RenderOutcome>> = pool.install(|| {
        images
            .par_iter()
            .map(|(id, path)| render_one(cfg, id, path, &overlays_dir))
            .collect()
    });

    let mut summary = RenderSummary { images: images.len(), ..RenderSummary::default() };
    for ((id, _), result) in images.iter().zip(results) {
        match result.with_context(|| format!("while rendering `{id}`"))? {
            RenderOutcome::Rendered => summary.rendered += 1,
            RenderOutcome::UpToDate => summary.up_to_date += 1,
            RenderOutcome::MissingGaze => summary.missing_gaze += 1,
        }
    }
    update_run_manifest(cfg, |m| m.render = Some(summary))?;
    log::info!(
        "render: {} image(s): {} rendered, {} up to date, {} missing gaze",
        summary.images,
        summary.rendered,
        summary.up_to_date,
        summary.missing_gaze
    );
    Ok(summary)
}

// ---------------------------------------------------------------------------
// build

/// One line of injections.jsonl: the error-detection gold label for a
/// study, with full provenance when a corruption was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub study_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<ErrorInjection>,
}

fn index_reports(reports: Vec<Report>) -> anyhow::Result<BTreeMap<String, Report>> {
    let mut map = BTreeMap::new();
    for report in reports {
        let id = report.study_id.clone();
        if map.insert(id.clone(), report).is_some() {
            return Err(validation_error(format!("duplicate study_id `{id}` in reports")));
        }
    }
    Ok(map)
}

/// Build the task manifest for every eval study whose raw image and
/// overlay both exist. Instances are emitted task-major, studies sorted,
/// so the manifest bytes are a pure function of inputs, seed, and config.
pub fn cmd_build(cfg: &RunConfig) -> anyhow::Result<BuildSummary> {
    let split = formats::load_split(&cfg.paths.split).map_err(|e| validation_error(e.to_string()))?;
    check_split(&split).map_err(|e| validation_error(e.to_string()))?;
    if split.eval_ids.is_empty() {
        return Err(validation_error("split has no eval ids; nothing to build"));
    }
    let templates = cfg.templates();
    templates
        .validate()
        .map_err(|e| validation_error(format!("prompt templates: {e}")))?;

    let reports = index_reports(
        formats::load_reports(&cfg.paths.reports).map_err(|e| validation_error(e.to_string()))?,
    )?;
    let mut ddx_gold: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in
        formats::load_ddx_gold(&cfg.paths.ddx_gold).map_err(|e| validation_error(e.to_string()))?
    {
        if ddx_gold.insert(row.study_id.clone(), row.icd_codes).is_some() {
            return Err(validation_error(format!(
                "duplicate study_id `{}` in diagnosis gold",
                row.study_id
            )));
        }
    }
    let mut vqa: BTreeMap<String, Vec<VqaRecord>> = BTreeMap::new();
    for record in formats::load_vqa(&cfg.paths.vqa).map_err(|e| validation_error(e.to_string()))? {
        vqa.entry(record.study_id.clone()).or_default().push(record);
    }
    let lexicon =
        formats::load_lexicon(&cfg.paths.lexicon).map_err(|e| validation_error(e.to_string()))?;

    let raw_images: BTreeMap<String, PathBuf> = list_images(&cfg.paths.images)?.into_iter().collect();
    let overlays_dir = cfg.overlays_dir();
    let mut refs_by_study: BTreeMap<String, ImageRefs> = BTreeMap::new();
    for id in &split.eval_ids {
        let Some(raw) = raw_images.get(id) else {
            log::warn!("eval study `{id}` has no image; skipping study");
            continue;
        };
        let overlay = overlays_dir.join(format!("{id}.png"));
        if !overlay.is_file() {
            log::warn!("eval study `{id}` has no overlay (run `render` first); skipping study");
            continue;
        }
        refs_by_study.insert(
            id.clone(),
            ImageRefs {
                study_id: id.clone(),
                raw: raw.display().to_string(),
                overlay: overlay.display().to_string(),
            },
        );
    }

    let tasks = cfg.selected_tasks();
    let mut summary = BuildSummary {
        studies: refs_by_study.len(),
        ..BuildSummary::default()
    };
    for &kind in &tasks {
        summary.instances.insert(kind, 0);
        summary.skipped.insert(kind, 0);
    }
    let mut instances: Vec<TaskInstance> = Vec::new();
    let mut injections: Vec<InjectionRecord> = Vec::new();

    for &kind in &tasks {
        for (study_id, refs) in &refs_by_study {
            let built_before = instances.len();
            match kind {
                TaskKind::Gen | TaskKind::Sum | TaskKind::Err => {
                    let Some(report) = reports.get(study_id) else {
                        log::warn!("no report for `{study_id}`; skipping {kind}");
                        *summary.skipped.get_mut(&kind).unwrap() += 1;
                        continue;
                    };
                    let result = match kind {
                        TaskKind::Gen => build_gen(report, refs, &templates),
                        TaskKind::Sum => build_sum(report, refs, &templates),
                        TaskKind::Err => inject_error(
                            report,
                            cfg.seed,
                            cfg.corrupt_probability,
                            &lexicon,
                        )
                        .and_then(|(corrupted, outcome)| {
                            let record = InjectionRecord {
                                study_id: study_id.clone(),
                                label: outcome.label().to_string(),
                                injection: match &outcome {
                                    gazemark_core::corrupt::InjectionOutcome::Corrupted(i) => {
                                        Some(i.clone())
                                    }
                                    gazemark_core::corrupt::InjectionOutcome::Clean => None,
                                },
                            };
                            let instance = build_err(&corrupted, refs, &outcome, &templates)?;
                            if record.injection.is_some() {
                                summary.corrupted += 1;
                            } else {
                                summary.clean += 1;
                            }
                            injections.push(record);
                            Ok(instance)
                        }),
                        _ => unreachable!(),
                    };
                    match result {
                        Ok(instance) => instances.push(instance),
                        Err(e) => {
                            log::warn!("cannot build {kind} for `{study_id}`: {e}");
                            *summary.skipped.get_mut(&kind).unwrap() += 1;
                        }
                    }
                }
                TaskKind::Ddx => {
                    let Some(codes) = ddx_gold.get(study_id) else {
                        log::warn!("no gold diagnoses for `{study_id}`; skipping DDX");
                        *summary.skipped.get_mut(&kind).unwrap() += 1;
                        continue;
                    };
                    match build_ddx(codes, refs, &templates) {
                        Ok(instance) => instances.push(instance),
                        Err(e) => {
                            log::warn!("cannot build DDX for `{study_id}`: {e}");
                            *summary.skipped.get_mut(&kind).unwrap() += 1;
                        }
                    }
                }
                TaskKind::Vqa => {
                    let Some(records) = vqa.get(study_id) else {
                        log::warn!("no VQA records for `{study_id}`; skipping VQA");
                        *summary.skipped.get_mut(&kind).unwrap() += 1;
                        continue;
                    };
                    for record in records {
                        match build_vqa(record, refs, &templates) {
                            Ok(instance) => instances.push(instance),
                            Err(e) => {
                                log::warn!("cannot build VQA for `{study_id}`: {e}");
                                *summary.skipped.get_mut(&kind).unwrap() += 1;
                            }
                        }
                    }
                }
            }
            *summary.instances.get_mut(&kind).unwrap() += instances.len() - built_before;
        }
    }

    formats::write_if_changed(&cfg.manifest_path(), &formats::to_jsonl(&instances))?;
    if tasks.contains(&TaskKind::Err) {
        formats::write_if_changed(&cfg.injections_path(), &formats::to_jsonl(&injections))?;
    }
    update_run_manifest(cfg, |m| m.build = Some(summary.clone()))?;
    log::info!(
        "build: {} instance(s) across {} task(s) from {} study(ies); error labels {} Y / {} N",
        instances.len(),
        tasks.len(),
        summary.studies,
        summary.corrupted,
        summary.clean
    );
    Ok(summary)
}

// ---------------------------------------------------------------------------
// run

/// Query the endpoint for every manifest instance under the selected
/// condition(s). Successes land in the cache as they complete, so an
/// interrupted or partially failed run resumes instead of re-spending.
pub fn cmd_run(cfg: &RunConfig, selection: ConditionSelection) -> anyhow::Result<RunSummary> {
    let manifest_path = cfg.manifest_path();
    if !manifest_path.is_file() {
        return Err(validation_error(format!(
            "no manifest at {}; run `build` first",
            manifest_path.display()
        )));
    }
    let all = formats::load_manifest(&manifest_path).map_err(|e| validation_error(e.to_string()))?;
    let tasks: BTreeSet<TaskKind> = cfg.selected_tasks().into_iter().collect();
    let instances: Vec<TaskInstance> =
        all.into_iter().filter(|i| tasks.contains(&i.kind)).collect();
    if instances.is_empty() {
        return Err(validation_error("manifest holds no instances for the selected tasks"));
    }
    let conditions = selection.conditions();
    let client = VlmClient::new(cfg.endpoint.clone()).map_err(|e| validation_error(e.to_string()))?;
    let cache = ExchangeCache::open(&cfg.cache_dir())?;

    log::info!(
        "run: {} instance(s) x {} condition(s) against {} (model {}, {} in flight)",
        instances.len(),
        conditions.len(),
        cfg.endpoint.base_url,
        cfg.endpoint.model,
        cfg.endpoint.concurrency
    );
    let exchanges = client.run_batch(&instances, &conditions, &cache);
    let succeeded = exchanges.iter().filter(|e| e.is_success()).count();
    let summary = RunSummary {
        conditions,
        requested: exchanges.len(),
        succeeded,
        failed: exchanges.len() - succeeded,
    };
    update_run_manifest(cfg, |m| m.run = Some(summary.clone()))?;

    for failure in exchanges.iter().filter(|e| !e.is_success()).take(5) {
        log::error!(
            "{} [{}]: {}",
            failure.instance_id,
            failure.condition,
            failure.error.as_deref().unwrap_or("unknown failure")
        );
    }
    if summary.failed > 0 {
        anyhow::bail!(
            "{} of {} exchange(s) failed; completed responses are cached and a rerun resumes from them",
            summary.failed,
            summary.requested
        );
    }
    log::info!("run: all {} exchange(s) succeeded", summary.requested);
    Ok(summary)
}

// ---------------------------------------------------------------------------
// score

fn score_cell(
    kind: TaskKind,
    responses: &[(&TaskInstance, String)],
    recognizer: &dyn MentionRecognizer,
    embedder: Option<&dyn Embedder>,
    lexicon: &DiagnosisLexicon,
    linking: &LinkingConfig,
) -> anyhow::Result<CellScore> {
    let n = responses.len();
    let (metric, n_unparseable) = match kind {
        TaskKind::Gen | TaskKind::Sum => {
            let mut f1_sum = 0.0;
            let mut unparseable = 0;
            for (instance, text) in responses {
                if tokenize(text).is_empty() {
                    unparseable += 1;
                }
                f1_sum += rouge_l(text, &instance.reference).f1;
            }
            (f1_sum / n as f64, unparseable)
        }
        TaskKind::Err => {
            let mut pairs = Vec::with_capacity(n);
            let mut unparseable = 0;
            for (instance, text) in responses {
                let predicted = extract_yn_with_threshold(text, linking.fuzzy_yn_threshold);
                if predicted == YnAnswer::Unparseable {
                    unparseable += 1;
                }
                let gold = match instance.reference.as_str() {
                    "Y" => YnAnswer::Yes,
                    "N" => YnAnswer::No,
                    other => anyhow::bail!(
                        "instance {} has error label `{other}` (expected Y or N)",
                        instance.instance_id
                    ),
                };
                pairs.push((predicted, gold));
            }
            (accuracy(&pairs).expect("cell is nonempty"), unparseable)
        }
        TaskKind::Vqa => {
            let mut pairs = Vec::with_capacity(n);
            let mut unparseable = 0;
            for (instance, text) in responses {
                let predicted = vqa_normalize(text);
                if predicted.is_empty() {
                    unparseable += 1;
                }
                pairs.push((predicted, vqa_normalize(&instance.reference)));
            }
            (accuracy(&pairs).expect("cell is nonempty"), unparseable)
        }
        TaskKind::Ddx => {
            let mut per_study = Vec::with_capacity(n);
            let mut unparseable = 0;
            for (instance, text) in responses {
                let mentions = recognizer
                    .recognize(text)
                    .with_context(|| format!("recognizing mentions for {}", instance.instance_id))?;
                let outcome = link_mentions(&mentions, lexicon, embedder, linking.tau)
                    .with_context(|| format!("linking mentions for {}", instance.instance_id))?;
                if outcome.codes.is_empty() {
                    unparseable += 1;
                }
                let gold: BTreeSet<String> = instance
                    .reference
                    .split(',')
                    .map(|c| c.trim().to_string())
                    .filter(|c| !c.is_empty())
                    .collect();
                per_study.push((outcome.codes, gold));
            }
            (
                ddx_score_with(&per_study, linking.ddx_aggregation).f1,
                unparseable,
            )
        }
    };
    Ok(CellScore {
        score: round2(100.0 * metric),
        n_instances: n,
        n_unparseable,
    })
}

/// Score every cached response per task and condition, writing report.json
/// and report.md. Conditions with no successful exchanges are reported as
/// skipped rather than invented.
pub fn cmd_score(cfg: &RunConfig) -> anyhow::Result<MetricsReport> {
    let manifest_path = cfg.manifest_path();
    if !manifest_path.is_file() {
        return Err(validation_error(format!(
            "no manifest at {}; run `build` first",
            manifest_path.display()
        )));
    }
    let manifest =
        formats::load_manifest(&manifest_path).map_err(|e| validation_error(e.to_string()))?;
    let lexicon =
        formats::load_lexicon(&cfg.paths.lexicon).map_err(|e| validation_error(e.to_string()))?;
    let cache = ExchangeCache::open(&cfg.cache_dir())?;

    let timeout = cfg.services.timeout_secs.unwrap_or(DEFAULT_SERVICE_TIMEOUT_SECS);
    let recognizer: Box<dyn MentionRecognizer> = match &cfg.services.ner_url {
        Some(url) => Box::new(NerClient::new(url, timeout)),
        None => Box::new(LexiconScanner { lexicon: &lexicon }),
    };
    let embed_client = cfg
        .services
        .embed_url
        .as_ref()
        .map(|url| EmbedClient::new(url, timeout));
    let embedder = embed_client.as_ref().map(|c| c as &dyn Embedder);

    let mut by_kind: BTreeMap<TaskKind, Vec<&TaskInstance>> = BTreeMap::new();
    for instance in &manifest {
        by_kind.entry(instance.kind).or_default().push(instance);
    }

    let mut cells: BTreeMap<TaskKind, (Option<CellScore>, Option<CellScore>)> = BTreeMap::new();
    let mut summary = ScoreSummary::default();
    for kind in cfg.selected_tasks() {
        let instances = by_kind.get(&kind).cloned().unwrap_or_default();
        let mut row: (Option<CellScore>, Option<CellScore>) = (None, None);
        for condition in Condition::BOTH {
            let mut responses: Vec<(&TaskInstance, String)> = Vec::new();
            for instance in &instances {
                let key = cache_key(
                    &instance.instance_id,
                    condition,
                    &cfg.endpoint.model,
                    &prompt_hash(&instance.prompt),
                );
                if let Some(text) = cache.load(&key).and_then(|e| e.response_text) {
                    responses.push((instance, text));
                }
            }
            if responses.is_empty() {
                log::warn!("no responses for {kind} under {condition}; cell skipped");
                summary.cells_skipped += 1;
                continue;
            }
            let cell = score_cell(
                kind,
                &responses,
                recognizer.as_ref(),
                embedder,
                &lexicon,
                &cfg.linking,
            )?;
            summary.cells_scored += 1;
            match condition {
                Condition::NoGaze => row.0 = Some(cell),
                Condition::Gaze => row.1 = Some(cell),
            }
        }
        cells.insert(kind, row);
    }

    let report = assemble_report(cells);
    formats::write_if_changed(&cfg.report_json_path(), &formats::to_json_pretty(&report))?;
    formats::write_if_changed(&cfg.report_md_path(), report.to_markdown().as_bytes())?;
    update_run_manifest(cfg, |m| m.score = Some(summary))?;
    log::info!(
        "score: {} cell(s) scored, {} skipped; wrote {} and {}",
        summary.cells_scored,
        summary.cells_skipped,
        cfg.report_json_path().display(),
        cfg.report_md_path().display()
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// validate

/// Everything `validate` found, split by severity. Warnings flag data a
/// later stage will skip; errors block the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

/// Read-only preflight over config and data roots.
pub fn collect_validation(cfg: &RunConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    let err = &mut report.errors;

    let images = match list_images(&cfg.paths.images) {
        Ok(images) => {
            if images.is_empty() {
                err.push(format!(
                    "image directory {} holds no png/jpeg files",
                    cfg.paths.images.display()
                ));
            }
            images
        }
        Err(e) => {
            err.push(e.to_string());
            Vec::new()
        }
    };

    let mut dims: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for (id, path) in &images {
        match imaging::image_dimensions(path) {
            Ok(d) => {
                dims.insert(id, d);
            }
            Err(e) => report.errors.push(e.to_string()),
        }
    }

    for (id, _) in &images {
        let Some(gaze_path) = find_gaze(&cfg.paths.gaze, id) else {
            report
                .warnings
                .push(format!("image `{id}` has no gaze recording; render will skip it"));
            continue;
        };
        match gaze_io::load_recording(&gaze_path, id, GAZE_SAMPLE_RATE_HZ) {
            Err(e) => report.errors.push(format!("{}: {e}", gaze_path.display())),
            Ok(recording) => {
                if let Some(&(w, h)) = dims.get(id.as_str()) {
                    let v = validate_recording(&recording, w, h);
                    if !v.monotone_time {
                        report
                            .warnings
                            .push(format!("gaze timestamps for `{id}` are not non-decreasing"));
                    }
                    if v.n_out_of_bounds > 0 {
                        report.warnings.push(format!(
                            "gaze for `{id}`: {}/{} samples fall outside the {}x{} image",
                            v.n_out_of_bounds, v.n_total, w, h
                        ));
                    }
                }
            }
        }
    }

    let image_ids: BTreeSet<&str> = images.iter().map(|(id, _)| id.as_str()).collect();
    match formats::load_split(&cfg.paths.split) {
        Err(e) => report.errors.push(e.to_string()),
        Ok(split) => {
            if let Err(e) = check_split(&split) {
                report.errors.push(e.to_string());
            }
            if split.eval_ids.is_empty() {
                report.errors.push("split has no eval ids".to_string());
            }
            for id in &split.eval_ids {
                if !image_ids.contains(id.as_str()) {
                    report
                        .warnings
                        .push(format!("eval study `{id}` has no image; build will skip it"));
                }
            }
        }
    }

    match formats::load_reports(&cfg.paths.reports) {
        Err(e) => report.errors.push(e.to_string()),
        Ok(reports) => {
            let mut seen = BTreeSet::new();
            for r in &reports {
                if !seen.insert(r.study_id.as_str()) {
                    report
                        .errors
                        .push(format!("duplicate study_id `{}` in reports", r.study_id));
                }
                if r.findings.trim().is_empty() {
                    report.warnings.push(format!(
                        "report `{}` has empty findings; GEN/SUM/ERR will skip it",
                        r.study_id
                    ));
                }
            }
        }
    }

    match formats::load_ddx_gold(&cfg.paths.ddx_gold) {
        Err(e) => report.errors.push(e.to_string()),
        Ok(rows) => {
            let mut seen = BTreeSet::new();
            for row in &rows {
                if !seen.insert(row.study_id.as_str()) {
                    report
                        .errors
                        .push(format!("duplicate study_id `{}` in diagnosis gold", row.study_id));
                }
                if row.icd_codes.iter().all(|c| c.trim().is_empty()) {
                    report.warnings.push(format!(
                        "diagnosis gold for `{}` has no codes; DDX will skip it",
                        row.study_id
                    ));
                }
            }
        }
    }

    match formats::load_vqa(&cfg.paths.vqa) {
        Err(e) => report.errors.push(e.to_string()),
        Ok(records) => {
            for r in &records {
                if r.question.trim().is_empty() || r.answer.trim().is_empty() {
                    report.warnings.push(format!(
                        "VQA record for `{}` has an empty question or answer; it will be skipped",
                        r.study_id
                    ));
                }
            }
        }
    }

    match formats::load_lexicon(&cfg.paths.lexicon) {
        Err(e) => report.errors.push(e.to_string()),
        Ok(lexicon) => {
            if lexicon.is_empty() {
                report
                    .warnings
                    .push("lexicon is empty; diagnosis linking can never match".to_string());
            }
        }
    }

    if let Err(e) = cfg.templates().validate() {
        report.errors.push(format!("prompt templates: {e}"));
    }

    report
}

/// Log the validation report and fail (exit 1) when errors exist. Writes
/// nothing, ever.
pub fn cmd_validate(cfg: &RunConfig) -> anyhow::Result<ValidationReport> {
    let report = collect_validation(cfg);
    for warning in &report.warnings {
        log::warn!("{warning}");
    }
    for error in &report.errors {
        log::error!("{error}");
    }
    if report.errors.is_empty() {
        log::info!("validate: ok ({} warning(s))", report.warnings.len());
        Ok(report)
    } else {
        Err(validation_error(format!(
            "validation found {} error(s) and {} warning(s)",
            report.errors.len(),
            report.warnings.len()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_selection_parses_and_expands() {
        assert_eq!("both".parse::<ConditionSelection>().unwrap().conditions(), Condition::BOTH);
        assert_eq!(
            "no-gaze".parse::<ConditionSelection>().unwrap().conditions(),
            vec![Condition::NoGaze]
        );
        assert_eq!(
            "GAZE".parse::<ConditionSelection>().unwrap().conditions(),
            vec![Condition::Gaze]
        );
        assert!("sideways".parse::<ConditionSelection>().is_err());
    }

    #[test]
    fn content_key_tracks_each_input() {
        let params = OverlayConfig::default();
        let base = overlay_content_key(b"img", b"gaze", &params);
        assert_eq!(base, overlay_content_key(b"img", b"gaze", &params));
        assert_ne!(base, overlay_content_key(b"img2", b"gaze", &params));
        assert_ne!(base, overlay_content_key(b"img", b"gaze2", &params));
        let mut other = params.clone();
        other.dot_radius += 1;
        assert_ne!(base, overlay_content_key(b"img", b"gaze", &other));
        // Boundary shifts between adjacent inputs must change the key.
        assert_ne!(
            overlay_content_key(b"ab", b"c", &params),
            overlay_content_key(b"a", b"bc", &params)
        );
    }

    #[test]
    fn ambiguous_image_stems_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.png"), b"x").unwrap();
        std::fs::write(dir.path().join("s1.jpg"), b"x").unwrap();
        let err = list_images(dir.path()).unwrap_err();
        assert!(err.to_string().contains("ambiguous image id `s1`"));
        assert!(err.downcast_ref::<ValidationFailure>().is_some());
    }

    #[test]
    fn list_images_ignores_unrelated_files_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.jpeg", "notes.txt", "c.JPG"] {
            std::fs::write(dir.path().join(name), b"x").unwrap();
        }
        let ids: Vec<String> = list_images(dir.path()).unwrap().into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }
}
