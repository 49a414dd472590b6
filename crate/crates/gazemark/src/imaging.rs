//! Image decode/encode glue around the core pixel types.
//!
//! Decoding converts everything through RGB and applies the core BT.601
//! luma so color and grayscale sources land in the same working space;
//! the library's own grayscale conversion is not used because its weights
//! differ. Encoding pins the PNG filter and compression so identical
//! pixels produce identical bytes.

use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};

use gazemark_core::overlay::{luma_bt601, GrayImage, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot encode png: {0}")]
    Encode(#[source] image::ImageError),
}

/// Decode any supported image into BT.601 grayscale.
pub fn decode_gray(path: &Path) -> Result<GrayImage, ImagingError> {
    let bytes = std::fs::read(path).map_err(|source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_gray_bytes(&bytes).map_err(|source| ImagingError::Decode {
        path: path.display().to_string(),
        source,
    })
}

fn decode_gray_bytes(bytes: &[u8]) -> Result<GrayImage, image::ImageError> {
    let rgb = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .pixels()
        .map(|p| luma_bt601(p.0[0], p.0[1], p.0[2]))
        .collect();
    Ok(GrayImage::new(w, h, pixels).expect("decoded dimensions match buffer"))
}

/// Encode to PNG with pinned settings, so reruns are byte-identical.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImagingError> {
    let mut out = Vec::new();
    let encoder = PngEncoder::new_with_quality(
        &mut out,
        CompressionType::Default,
        FilterType::Adaptive,
    );
    encoder
        .write_image(
            img.pixels(),
            img.width(),
            img.height(),
            ExtendedColorType::Rgb8,
        )
        .map_err(ImagingError::Encode)?;
    Ok(out)
}

/// Pixel dimensions without a full decode.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32), ImagingError> {
    image::image_dimensions(path).map_err(|source| ImagingError::Decode {
        path: path.display().to_string(),
        source,
    })
}
