//! On-disk wire formats: json-lines corpora, the split file, the task
//! manifest, and atomic write helpers.
//!
//! Writers go through a temp file in the destination directory and rename
//! into place, so interrupted runs never leave half-written artifacts.
//! `write_if_changed` additionally skips the rename when the bytes are
//! already on disk, which keeps reruns from touching timestamps.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gazemark_core::extract::{DiagnosisLexicon, LexiconEntry};
use gazemark_core::task::{DatasetSplit, Report, TaskInstance, VqaRecord};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    BadLine {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("cannot parse {path}: {message}")]
    BadJson { path: PathBuf, message: String },
    #[error("invalid lexicon in {path}: {source}")]
    BadLexicon {
        path: PathBuf,
        #[source]
        source: gazemark_core::extract::LexiconError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

/// Read a json-lines file; blank lines are skipped, errors carry 1-based
/// line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = std::io::BufReader::new(file);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| FormatError::BadLine {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Serialize items one-per-line. Returns the bytes; pair with
/// [`write_if_changed`] to hit disk.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("jsonl items serialize");
        out.push(b'\n');
    }
    out
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| FormatError::BadJson {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline, the fixed layout for report.json
/// and the run manifest.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

/// Atomically replace `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path)
        .map_err(|e| FormatError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Atomically write `bytes` unless the file already holds exactly them.
/// Returns whether anything was written.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool, FormatError> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    write_atomic(path, bytes)?;
    Ok(true)
}

/// Gold diagnosis row: the ICD codes assigned to one study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdxGold {
    pub study_id: String,
    pub icd_codes: Vec<String>,
}

pub fn load_reports(path: &Path) -> Result<Vec<Report>, FormatError> {
    read_jsonl(path)
}

pub fn load_ddx_gold(path: &Path) -> Result<Vec<DdxGold>, FormatError> {
    read_jsonl(path)
}

pub fn load_vqa(path: &Path) -> Result<Vec<VqaRecord>, FormatError> {
    read_jsonl(path)
}

pub fn load_split(path: &Path) -> Result<DatasetSplit, FormatError> {
    read_json(path)
}

pub fn load_lexicon(path: &Path) -> Result<DiagnosisLexicon, FormatError> {
    let entries: Vec<LexiconEntry> = read_jsonl(path)?;
    DiagnosisLexicon::new(entries).map_err(|source| FormatError::BadLexicon {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<TaskInstance>, FormatError> {
    read_jsonl(path)
}
