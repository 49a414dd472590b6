//! Run configuration: one TOML file drives every stage.
//!
//! Relative paths resolve against the config file's directory, so a run
//! directory can be archived and replayed from anywhere. The config hash
//! ties artifacts to the exact configuration that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gazemark_core::metrics::DdxAggregation;
use gazemark_core::overlay::{OverlayScale, OverlaySpec};
use gazemark_core::task::{PromptTemplates, TaskKind};

use crate::client::EndpointConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config:\n{}", issues.join("\n"))]
    Invalid { issues: Vec<String> },
}

/// Data roots and the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of raw grayscale X-rays (png/jpeg), one per study.
    pub images: PathBuf,
    /// Directory of gaze recordings, `<study_id>.csv` or `.json`.
    pub gaze: PathBuf,
    /// Reports as json lines {study_id, findings, impression}.
    pub reports: PathBuf,
    /// Gold diagnoses as json lines {study_id, icd_codes[]}.
    pub ddx_gold: PathBuf,
    /// VQA records as json lines {study_id, question, answer}.
    pub vqa: PathBuf,
    /// Diagnosis lexicon as json lines {icd_code, canonical_name, synonyms[], embedding?[]}.
    pub lexicon: PathBuf,
    /// Split file as json {train_ids[], eval_ids[]}.
    pub split: PathBuf,
    /// Output directory for overlays, manifest, cache, and reports.
    pub out: PathBuf,
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.images,
            &mut self.gaze,
            &mut self.reports,
            &mut self.ddx_gold,
            &mut self.vqa,
            &mut self.lexicon,
            &mut self.split,
            &mut self.out,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Overlay rendering parameters plus the accumulation cell size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlayConfig {
    pub color: [u8; 3],
    pub dot_radius: u32,
    pub alpha_max: f64,
    pub scale: OverlayScale,
    pub cell_size: u32,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        let spec = OverlaySpec::default();
        OverlayConfig {
            color: spec.color,
            dot_radius: spec.dot_radius,
            alpha_max: spec.alpha_max,
            scale: spec.scale,
            cell_size: 1,
        }
    }
}

impl OverlayConfig {
    pub fn to_spec(&self) -> OverlaySpec {
        OverlaySpec {
            color: self.color,
            dot_radius: self.dot_radius,
            alpha_max: self.alpha_max,
            scale: self.scale,
        }
    }
}

/// Answer-extraction thresholds and diagnosis aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkingConfig {
    /// Minimum linking similarity for the embedding and fuzzy paths.
    pub tau: f64,
    pub ddx_aggregation: DdxAggregation,
    /// Minimum edit-distance ratio for the fuzzy Y/N pass.
    pub fuzzy_yn_threshold: f64,
}

impl Default for LinkingConfig {
    fn default() -> Self {
        LinkingConfig {
            tau: 0.85,
            ddx_aggregation: DdxAggregation::Micro,
            fuzzy_yn_threshold: gazemark_core::extract::DEFAULT_YN_THRESHOLD,
        }
    }
}

/// Optional external recognizer/embedder endpoints. When unset, scoring
/// uses the deterministic lexicon fallbacks; there is no silent fallback
/// when a configured service fails.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServicesConfig {
    pub ner_url: Option<String>,
    pub embed_url: Option<String>,
    pub timeout_secs: Option<u64>,
}

/// Render-stage parallelism. 0 means one worker per CPU.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub workers: usize,
}

fn default_seed() -> u64 {
    42
}

/// Matches the evaluation corpus error rate the injector is calibrated to.
fn default_corrupt_probability() -> f64 {
    0.7317
}

fn default_tasks() -> Vec<TaskKind> {
    TaskKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_corrupt_probability")]
    pub corrupt_probability: f64,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskKind>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub overlay: OverlayConfig,
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub linking: LinkingConfig,
    #[serde(default)]
    pub services: ServicesConfig,
    #[serde(default)]
    pub prompts: Option<PromptTemplates>,
    #[serde(default)]
    pub render: RenderConfig,
}

impl RunConfig {
    /// Parse a TOML config and resolve its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.resolve(base);
        config.validated()
    }

    /// Enforce the cross-field invariants that serde cannot.
    pub fn validated(self) -> Result<RunConfig, ConfigError> {
        let mut issues = Vec::new();
        if self.tasks.is_empty() {
            issues.push("tasks: at least one task must be selected".to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(*t) {
                issues.push(format!("tasks: `{t}` listed more than once"));
            }
        }
        if !(0.0..=1.0).contains(&self.corrupt_probability) {
            issues.push(format!(
                "corrupt_probability: {} outside [0, 1]",
                self.corrupt_probability
            ));
        }
        if let Err(e) = self.overlay.to_spec().validate() {
            issues.push(format!("overlay: {e}"));
        }
        if !(self.linking.tau > 0.0 && self.linking.tau <= 1.0) {
            issues.push(format!("linking.tau: {} outside (0, 1]", self.linking.tau));
        }
        if !(self.linking.fuzzy_yn_threshold > 0.0 && self.linking.fuzzy_yn_threshold <= 1.0) {
            issues.push(format!(
                "linking.fuzzy_yn_threshold: {} outside (0, 1]",
                self.linking.fuzzy_yn_threshold
            ));
        }
        if self.endpoint.timeout_secs == 0 {
            issues.push("endpoint.timeout_secs: must be positive".to_string());
        }
        if self.endpoint.backoff_multiplier < 1.0 {
            issues.push(format!(
                "endpoint.backoff_multiplier: {} is below 1",
                self.endpoint.backoff_multiplier
            ));
        }
        if self.endpoint.concurrency == 0 {
            issues.push("endpoint.concurrency: must be at least 1".to_string());
        }
        if let Some(t) = &self.prompts {
            if let Err(e) = t.validate() {
                issues.push(format!("prompts: {e}"));
            }
        }
        if issues.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid { issues })
        }
    }

    /// Prompt wording for this run: the configured override or the built-in
    /// v1 templates.
    pub fn templates(&self) -> PromptTemplates {
        self.prompts.clone().unwrap_or_default()
    }

    /// Selected tasks in canonical order, deduplicated.
    pub fn selected_tasks(&self) -> Vec<TaskKind> {
        let set: std::collections::BTreeSet<TaskKind> = self.tasks.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Hash of the resolved configuration; artifacts record it so stale
    /// outputs are detectable.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn overlays_dir(&self) -> PathBuf {
        self.paths.out.join("overlays")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.out.join("manifest.jsonl")
    }

    pub fn injections_path(&self) -> PathBuf {
        self.paths.out.join("injections.jsonl")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.out.join("cache")
    }

    pub fn report_json_path(&self) -> PathBuf {
        self.paths.out.join("report.json")
    }

    pub fn report_md_path(&self) -> PathBuf {
        self.paths.out.join("report.md")
    }

    pub fn run_manifest_path(&self) -> PathBuf {
        self.paths.out.join("run_manifest.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const MINIMAL: &str = r#"
[paths]
images = "data/images"
gaze = "data/gaze"
reports = "data/reports.jsonl"
ddx_gold = "data/ddx.jsonl"
vqa = "data/vqa.jsonl"
lexicon = "data/lexicon.jsonl"
split = "data/split.json"
out = "out"

[endpoint]
base_url = "http://127.0.0.1:9/v1"
model = "test-model"
"#;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("run.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_defaults_and_resolved_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write_config(dir.path(), MINIMAL)).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.corrupt_probability, 0.7317);
        assert_eq!(cfg.tasks, TaskKind::ALL.to_vec());
        assert_eq!(cfg.overlay, OverlayConfig::default());
        assert_eq!(cfg.linking.tau, 0.85);
        assert_eq!(cfg.endpoint.max_retries, 3);
        assert_eq!(cfg.endpoint.concurrency, 4);
        assert!(cfg.paths.images.is_absolute());
        assert!(cfg.paths.images.starts_with(dir.path()));
        assert_eq!(cfg.manifest_path(), dir.path().join("out/manifest.jsonl"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{MINIMAL}\n[overlay]\ntypo_key = 1\n");
        let err = RunConfig::load(&write_config(dir.path(), &body)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("typo_key"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn invalid_values_are_collected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "corrupt_probability = 1.5\ntasks = []\n{MINIMAL}\n[linking]\ntau = 0.0\n"
        );
        let err = RunConfig::load(&write_config(dir.path(), &body)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("corrupt_probability"));
        assert!(msg.contains("tasks"));
        assert!(msg.contains("tau"));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write_config(dir.path(), MINIMAL)).unwrap();
        assert_eq!(cfg.config_hash(), cfg.config_hash());
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn task_selection_is_canonicalized() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("tasks = [\"VQA\", \"GEN\"]\n{MINIMAL}");
        let cfg = RunConfig::load(&write_config(dir.path(), &body)).unwrap();
        assert_eq!(cfg.selected_tasks(), vec![TaskKind::Gen, TaskKind::Vqa]);
    }
}
