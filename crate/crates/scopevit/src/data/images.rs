//! PNG and raw-buffer conversions for frames.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `[H, W, 3]` tensor in [0, 1] from an 8-bit RGB buffer.
pub fn tensor_from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Tensor> {
    if rgb.len() != height * width * 3 {
        return Err(Error::contract(format!(
            "rgb buffer has {} bytes, expected {}",
            rgb.len(),
            height * width * 3
        )));
    }
    Tensor::new(
        vec![height, width, 3],
        rgb.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Quantize a `[H, W, 3]` tensor to 8-bit RGB, clamping to [0, 1].
pub fn rgb8_from_tensor(image: &Tensor) -> (usize, usize, Vec<u8>) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let bytes = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    (h, w, bytes)
}

pub fn save_png(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::contract("rgb buffer does not match dimensions"))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    tensor_from_rgb8(h, w, img.as_raw())
}
