//! 8-bit PNG images and masks.
//!
//! Pixel values map to `byte / 255` with no sRGB linearisation; the model
//! applies its own tone curve. Alpha is ignored for images. Mask pixels
//! above 127 are valid.

use std::io::Cursor;
use std::path::Path;

use derender_core::{Grid, Image, Mask, NormalMap, ScalarMap};
use image::{ColorType, DynamicImage, ImageFormat, ImageReader};

#[derive(Debug, thiserror::Error)]
pub enum PngError {
    #[error("unsupported PNG layout {0:?}: only 8-bit gray or RGB(A) is accepted")]
    Unsupported(ColorType),
    #[error("masks must be 8-bit grayscale PNGs, found {0:?}")]
    MaskLayout(ColorType),
    #[error("invalid PNG: {0}")]
    Decode(#[from] image::ImageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn decode(bytes: &[u8]) -> Result<DynamicImage, PngError> {
    Ok(ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png).decode()?)
}

/// Decode an 8-bit gray, gray+alpha, RGB or RGBA PNG.
pub fn decode_image(bytes: &[u8]) -> Result<Image, PngError> {
    let img = decode(bytes)?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => return Err(PngError::Unsupported(other)),
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .pixels()
        .map(|p| {
            [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ]
        })
        .collect();
    Ok(Grid::new(h as usize, w as usize, data).expect("decoded dims"))
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask, PngError> {
    let img = decode(bytes)?;
    if img.color() != ColorType::L8 {
        return Err(PngError::MaskLayout(img.color()));
    }
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.pixels().map(|p| p[0] > 127).collect();
    Ok(Grid::new(h as usize, w as usize, data).expect("decoded dims"))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(img: DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// RGB8 PNG; values are clamped to [0, 1] and rounded.
pub fn encode_image(img: &Image) -> Vec<u8> {
    let raw: Vec<u8> = img
        .as_slice()
        .iter()
        .flatten()
        .map(|&v| quantize(v))
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer size");
    encode(DynamicImage::ImageRgb8(buf))
}

/// Gray PNG of a scalar map clamped to [0, 1].
pub fn encode_scalar(map: &ScalarMap) -> Vec<u8> {
    let raw: Vec<u8> = map.as_slice().iter().map(|&v| quantize(v)).collect();
    let buf = image::GrayImage::from_raw(map.width() as u32, map.height() as u32, raw)
        .expect("buffer size");
    encode(DynamicImage::ImageLuma8(buf))
}

/// Normals shown as `(n + 1) / 2` per component.
pub fn encode_normals(map: &NormalMap) -> Vec<u8> {
    encode_image(&map.map(|n| [(n.x + 1.0) * 0.5, (n.y + 1.0) * 0.5, (n.z + 1.0) * 0.5]))
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let raw: Vec<u8> = mask
        .as_slice()
        .iter()
        .map(|&v| if v { 255 } else { 0 })
        .collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer size");
    encode(DynamicImage::ImageLuma8(buf))
}

fn read(path: &Path) -> Result<Vec<u8>, PngError> {
    std::fs::read(path).map_err(|source| PngError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), PngError> {
    std::fs::write(path, bytes).map_err(|source| PngError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_image(path: &Path) -> Result<Image, PngError> {
    decode_image(&read(path)?)
}

pub fn read_mask(path: &Path) -> Result<Mask, PngError> {
    decode_mask(&read(path)?)
}
