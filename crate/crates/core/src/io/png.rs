//! 8-bit PNG encoding of images and masks.

use std::path::Path;

use image::{ExtendedColorType, ImageEncoder};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(pixels: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(pixels, width as u32, height as u32, color)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

/// PNG bytes of a `[3, H, W]` image with values in [0, 1].
pub fn encode_rgb(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.dim(0) != 3 {
        return Err(Error::Image(format!("expected [3, H, W], got {:?}", img.shape())));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let plane = h * w;
    let d = img.data();
    let pixels: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| to_u8(d[c * plane + i])))
        .collect();
    encode(&pixels, w, h, ExtendedColorType::Rgb8)
}

/// PNG bytes of an 8-bit grayscale raster.
pub fn encode_gray(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Image("pixel count does not match dimensions".into()));
    }
    encode(pixels, width, height, ExtendedColorType::L8)
}

pub fn write_rgb(path: &Path, img: &Tensor) -> Result<()> {
    atomic_write(path, &encode_rgb(img)?)
}

/// Binary `[H, W]` mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    if mask.rank() != 2 {
        return Err(Error::Image(format!("expected [H, W] mask, got {:?}", mask.shape())));
    }
    let pixels: Vec<u8> = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    atomic_write(path, &encode_gray(&pixels, mask.dim(1), mask.dim(0))?)
}

/// Read any PNG as a `[3, H, W]` tensor in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Decode grayscale PNG bytes into `(width, height, pixels)`.
pub fn decode_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}
