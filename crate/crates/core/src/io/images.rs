//! 8-bit PNG and raw little-endian f32 images.

use std::io::Cursor;

use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::imaging::Image;

fn img_err(e: image::ImageError) -> Error {
    Error::Image(e.to_string())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB PNG; values are clamped to [0, 1] and quantized.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::Image("pixel buffer does not match dimensions".into()))?;
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).map_err(img_err)?;
    Ok(out)
}

fn decode_any(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(img_err)
}

/// Any PNG as RGB in [0, 1]; an alpha channel is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let rgb = decode_any(bytes)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_data(
        w as usize,
        h as usize,
        rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    )
}

/// Foreground mask in [0, 1]: the alpha channel when present, otherwise
/// the luminance.
pub fn decode_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let img = decode_any(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = if img.color().has_alpha() {
        img.to_rgba8().pixels().map(|p| p[3] as f64 / 255.0).collect()
    } else {
        img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    Ok((w, h, values))
}

/// Row-major, RGB-interleaved f32 without a header.
pub fn encode_raw(img: &Image) -> Vec<u8> {
    img.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn decode_raw(bytes: &[u8], width: usize, height: usize) -> Result<Image> {
    let expected = width * height * 3 * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "raw image is {} bytes, a {width}x{height} RGB f32 image needs {expected}",
            bytes.len()
        )));
    }
    Image::from_data(
        width,
        height,
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    )
}
