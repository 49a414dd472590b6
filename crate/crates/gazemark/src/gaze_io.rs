//! Gaze recording readers: strict CSV (`t,x,y` header) and JSON arrays of
//! sample objects. Both reject non-finite or negative timestamps up front;
//! out-of-image coordinates are left for accumulation to drop and tally.

use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use gazemark_core::gaze::{GazeRecording, GazeSample};

/// Nominal eye-tracker rate of the source recordings.
pub const GAZE_SAMPLE_RATE_HZ: f64 = 1000.0;

#[derive(Debug, thiserror::Error)]
pub enum GazeIoError {
    #[error("cannot read gaze file: {0}")]
    Io(#[from] std::io::Error),
    #[error("gaze CSV header must be exactly `t,x,y`, got `{got}`")]
    BadHeader { got: String },
    #[error("gaze record {ordinal} is malformed: {what}")]
    MalformedRecord { ordinal: u64, what: String },
    #[error("gaze JSON is malformed: {0}")]
    BadJson(#[from] serde_json::Error),
    #[error("recording contains no samples")]
    EmptyRecording,
    #[error("unsupported gaze file extension on `{path}` (expected .csv or .json)")]
    UnknownExtension { path: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    t: f64,
    x: f64,
    y: f64,
}

fn check_sample(ordinal: u64, s: &RawSample) -> Result<GazeSample, GazeIoError> {
    if !s.t.is_finite() || s.t < 0.0 {
        return Err(GazeIoError::MalformedRecord {
            ordinal,
            what: format!("timestamp {} is not a finite non-negative number", s.t),
        });
    }
    Ok(GazeSample { t: s.t, x: s.x, y: s.y })
}

/// Parse the CSV gaze format. The header row must be exactly `t,x,y`;
/// record errors carry 1-based data-record ordinals.
pub fn parse_gaze_csv<R: Read>(
    reader: R,
    image_id: &str,
    sample_rate_hz: f64,
) -> Result<GazeRecording, GazeIoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| GazeIoError::BadHeader { got: e.to_string() })?;
    let fields: Vec<&str> = headers.iter().collect();
    if fields != ["t", "x", "y"] {
        return Err(GazeIoError::BadHeader { got: fields.join(",") });
    }

    let mut samples = Vec::new();
    for (i, record) in rdr.deserialize::<RawSample>().enumerate() {
        let ordinal = i as u64 + 1;
        let raw = record.map_err(|e| GazeIoError::MalformedRecord {
            ordinal,
            what: e.to_string(),
        })?;
        samples.push(check_sample(ordinal, &raw)?);
    }
    if samples.is_empty() {
        return Err(GazeIoError::EmptyRecording);
    }
    Ok(GazeRecording {
        image_id: image_id.to_string(),
        sample_rate_hz,
        samples,
    })
}

/// Parse the JSON gaze format: an array of `{t, x, y}` objects.
pub fn parse_gaze_json<R: Read>(
    reader: R,
    image_id: &str,
    sample_rate_hz: f64,
) -> Result<GazeRecording, GazeIoError> {
    let raw: Vec<RawSample> = serde_json::from_reader(reader)?;
    let mut samples = Vec::with_capacity(raw.len());
    for (i, s) in raw.iter().enumerate() {
        samples.push(check_sample(i as u64 + 1, s)?);
    }
    if samples.is_empty() {
        return Err(GazeIoError::EmptyRecording);
    }
    Ok(GazeRecording {
        image_id: image_id.to_string(),
        sample_rate_hz,
        samples,
    })
}

/// Load a recording, dispatching on the file extension.
pub fn load_recording(
    path: &Path,
    image_id: &str,
    sample_rate_hz: f64,
) -> Result<GazeRecording, GazeIoError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => parse_gaze_csv(reader, image_id, sample_rate_hz),
        Some("json") => parse_gaze_json(reader, image_id, sample_rate_hz),
        _ => Err(GazeIoError::UnknownExtension {
            path: path.display().to_string(),
        }),
    }
}

/// Serialize samples back to the JSON format. Uses shortest round-trip
/// float formatting, so parse(serialize(r)) reproduces every sample bit
/// for bit.
pub fn serialize_gaze_json(recording: &GazeRecording) -> String {
    serde_json::to_string_pretty(&recording.samples).expect("samples serialize")
}
