//! Eye-gaze recordings and their spatial accumulation into count grids.
//!
//! A recording is an ordered stream of `(t, x, y)` samples already
//! calibrated to image pixel space (origin top-left, x rightward, y
//! downward). Accumulation counts raw samples per grid cell; timestamps are
//! carried for auditing but do not weight the counts.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// One eye-tracker sample: time in seconds plus image-space coordinates.
///
/// Coordinates may fall outside the image; they are tallied as
/// out-of-bounds during validation and accumulation rather than rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// All gaze samples for one image, in file order.
///
/// `sample_rate_hz` is the nominal tracker rate (1000 for the source
/// recordings). Sample times are expected to be non-decreasing; violations
/// are reported by [`validate_recording`], not rejected here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeRecording {
    pub image_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<GazeSample>,
}

/// Audit summary of a recording against one image's dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub n_total: u64,
    pub n_in_bounds: u64,
    pub n_out_of_bounds: u64,
    pub monotone_time: bool,
}

/// Per-cell gaze counts aligned to an image of `width` x `height` pixels.
///
/// The grid has `ceil(height / cell_size)` rows and
/// `ceil(width / cell_size)` columns; counts are stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapGrid {
    width: u32,
    height: u32,
    cell_size: u32,
    rows: u32,
    cols: u32,
    counts: Vec<u32>,
}

/// Errors from explicit grid construction.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("counts length {got} does not match grid shape {rows}x{cols}")]
    CountShapeMismatch { rows: u32, cols: u32, got: usize },
}

impl HeatmapGrid {
    fn zeroed(width: u32, height: u32, cell_size: u32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        assert!(cell_size >= 1, "cell_size must be at least 1");
        let rows = height.div_ceil(cell_size);
        let cols = width.div_ceil(cell_size);
        HeatmapGrid {
            width,
            height,
            cell_size,
            rows,
            cols,
            counts: vec![0; rows as usize * cols as usize],
        }
    }

    /// Build a grid from explicit row-major counts.
    pub fn from_counts(
        width: u32,
        height: u32,
        cell_size: u32,
        counts: Vec<u32>,
    ) -> Result<Self, GridError> {
        let mut grid = Self::zeroed(width, height, cell_size);
        if counts.len() != grid.counts.len() {
            return Err(GridError::CountShapeMismatch {
                rows: grid.rows,
                cols: grid.cols,
                got: counts.len(),
            });
        }
        grid.counts = counts;
        Ok(grid)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cell_size(&self) -> u32 {
        self.cell_size
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn count(&self, row: u32, col: u32) -> u32 {
        self.counts[row as usize * self.cols as usize + col as usize]
    }

    /// Row-major counts.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Sum of all cell counts.
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Largest single-cell count.
    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Cells with a nonzero count as `(row, col, count)`.
    pub fn nonzero_cells(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.counts.iter().enumerate().filter(|&(_, &c)| c > 0).map(move |(i, &c)| {
            let row = (i / self.cols as usize) as u32;
            let col = (i % self.cols as usize) as u32;
            (row, col, c)
        })
    }
}

/// Result of accumulating a recording: the count grid plus the tally of
/// out-of-bounds samples that were dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapAccumulation {
    pub grid: HeatmapGrid,
    pub n_dropped: u64,
}

/// In-bounds test used by both validation and accumulation: the sample
/// lands on the image iff its floored coordinates index a valid pixel,
/// i.e. `0 <= x < width` and `0 <= y < height`. Non-finite coordinates are
/// out of bounds.
fn in_bounds(sample: &GazeSample, width: u32, height: u32) -> bool {
    let fx = libm::floor(sample.x);
    let fy = libm::floor(sample.y);
    fx >= 0.0 && fy >= 0.0 && fx < width as f64 && fy < height as f64
}

/// Summarize a recording against the image dimensions: total/in-bounds/
/// out-of-bounds sample counts and whether timestamps are non-decreasing.
pub fn validate_recording(r: &GazeRecording, width: u32, height: u32) -> ValidationSummary {
    assert!(width > 0 && height > 0, "image dimensions must be positive");
    let mut n_in = 0u64;
    let mut monotone = true;
    let mut prev_t = f64::NEG_INFINITY;
    for s in &r.samples {
        if in_bounds(s, width, height) {
            n_in += 1;
        }
        if s.t < prev_t {
            monotone = false;
        }
        prev_t = s.t;
    }
    let n_total = r.samples.len() as u64;
    ValidationSummary {
        n_total,
        n_in_bounds: n_in,
        n_out_of_bounds: n_total - n_in,
        monotone_time: monotone,
    }
}

/// Accumulate every in-bounds sample into its cell
/// `(floor(y / cell_size), floor(x / cell_size))`; out-of-bounds samples
/// are dropped and tallied.
pub fn accumulate_heatmap(
    r: &GazeRecording,
    width: u32,
    height: u32,
    cell_size: u32,
) -> HeatmapAccumulation {
    let mut grid = HeatmapGrid::zeroed(width, height, cell_size);
    let mut dropped = 0u64;
    let cell = cell_size as f64;
    for s in &r.samples {
        if !in_bounds(s, width, height) {
            dropped += 1;
            continue;
        }
        let col = libm::floor(s.x / cell) as usize;
        let row = libm::floor(s.y / cell) as usize;
        grid.counts[row * grid.cols as usize + col] += 1;
    }
    HeatmapAccumulation { grid, n_dropped: dropped }
}
