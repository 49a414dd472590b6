//! Red-dot heatmap compositing over grayscale chest X-rays.
//!
//! Each nonzero grid cell stamps a filled disc at its center; stamp
//! intensity is the cell count normalized by the per-image max, overlaps
//! sum and clamp at 1, and the result is alpha-blended over the gray base.
//! Darker dots therefore mean more gaze samples.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::gaze::HeatmapGrid;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OverlayError {
    #[error("pixel buffer length {got} does not match {width}x{height} with {channels} channel(s)")]
    PixelLengthMismatch { width: u32, height: u32, channels: u8, got: usize },
    #[error("grid is {grid_width}x{grid_height} but image is {image_width}x{image_height}")]
    DimensionMismatch {
        grid_width: u32,
        grid_height: u32,
        image_width: u32,
        image_height: u32,
    },
    #[error("alpha_max {alpha_max} outside (0, 1]")]
    InvalidAlpha { alpha_max: f64 },
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, OverlayError> {
        let expect = width as usize * height as usize;
        if pixels.len() != expect {
            return Err(OverlayError::PixelLengthMismatch {
                width,
                height,
                channels: 1,
                got: pixels.len(),
            });
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// Constant-valued image.
    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, OverlayError> {
        let expect = 3 * width as usize * height as usize;
        if pixels.len() != expect {
            return Err(OverlayError::PixelLengthMismatch {
                width,
                height,
                channels: 3,
                got: pixels.len(),
            });
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

/// How a cell count maps to stamp intensity before blending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlayScale {
    /// c / c_max
    Linear,
    /// ln(1 + c) / ln(1 + c_max), for heavy-tailed fixation patterns
    Log1p,
}

/// Rendering parameters for the gaze-condition overlay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlaySpec {
    pub color: [u8; 3],
    pub dot_radius: u32,
    pub alpha_max: f64,
    pub scale: OverlayScale,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec {
            color: [255, 0, 0],
            dot_radius: 2,
            alpha_max: 0.85,
            scale: OverlayScale::Linear,
        }
    }
}

impl OverlaySpec {
    pub fn validate(&self) -> Result<(), OverlayError> {
        if !(self.alpha_max > 0.0 && self.alpha_max <= 1.0) {
            return Err(OverlayError::InvalidAlpha { alpha_max: self.alpha_max });
        }
        Ok(())
    }
}

/// ITU-R BT.601 luma, rounded half-up. Equal channels map to themselves.
pub fn luma_bt601(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    libm::floor(y + 0.5) as u8
}

/// Composite `grid` onto `img` as colored discs.
///
/// A disc of radius `dot_radius` is stamped at each nonzero cell's center
/// pixel `(col*cs + cs/2, row*cs + cs/2)`. Stamp intensity is the scaled
/// count; overlapping stamps sum, then the per-pixel map is clamped to 1.
/// Each channel blends as `(1 - a*m)*gray + a*m*color`, rounded half-up.
/// An all-zero grid returns the grayscale replicated into RGB unchanged.
pub fn render_overlay(
    img: &GrayImage,
    grid: &HeatmapGrid,
    spec: &OverlaySpec,
) -> Result<RgbImage, OverlayError> {
    spec.validate()?;
    if grid.width() != img.width || grid.height() != img.height {
        return Err(OverlayError::DimensionMismatch {
            grid_width: grid.width(),
            grid_height: grid.height(),
            image_width: img.width,
            image_height: img.height,
        });
    }

    let w = img.width as usize;
    let h = img.height as usize;
    let c_max = grid.max_count();
    let mut out = vec![0u8; 3 * w * h];

    if c_max == 0 {
        for (i, &g) in img.pixels.iter().enumerate() {
            out[3 * i] = g;
            out[3 * i + 1] = g;
            out[3 * i + 2] = g;
        }
        return Ok(RgbImage { width: img.width, height: img.height, pixels: out });
    }

    let mut intensity = vec![0.0f64; w * h];
    let cs = grid.cell_size() as i64;
    let r = spec.dot_radius as i64;
    let log_denom = libm::log1p(c_max as f64);
    for (row, col, count) in grid.nonzero_cells() {
        let f = match spec.scale {
            OverlayScale::Linear => count as f64 / c_max as f64,
            OverlayScale::Log1p => libm::log1p(count as f64) / log_denom,
        };
        let cx = col as i64 * cs + cs / 2;
        let cy = row as i64 * cs + cs / 2;
        for dy in -r..=r {
            let py = cy + dy;
            if py < 0 || py >= h as i64 {
                continue;
            }
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let px = cx + dx;
                if px < 0 || px >= w as i64 {
                    continue;
                }
                intensity[py as usize * w + px as usize] += f;
            }
        }
    }

    let [cr, cg, cb] = spec.color;
    for (i, &g) in img.pixels.iter().enumerate() {
        let m = intensity[i].min(1.0);
        if m == 0.0 {
            out[3 * i] = g;
            out[3 * i + 1] = g;
            out[3 * i + 2] = g;
            continue;
        }
        let am = spec.alpha_max * m;
        let base = (1.0 - am) * g as f64;
        out[3 * i] = libm::floor(base + am * cr as f64 + 0.5) as u8;
        out[3 * i + 1] = libm::floor(base + am * cg as f64 + 0.5) as u8;
        out[3 * i + 2] = libm::floor(base + am * cb as f64 + 0.5) as u8;
    }
    Ok(RgbImage { width: img.width, height: img.height, pixels: out })
}
