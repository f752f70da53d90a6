//! Training-time image augmentation: random resized crop + horizontal flip.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Side of the square model input the crop is resized to.
    pub out_size: usize,
    /// Crop area bounds as fractions of the source area.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Aspect-ratio bounds of the crop window.
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub flip_prob: f64,
}

impl AugmentConfig {
    pub fn for_size(out_size: usize) -> Self {
        AugmentConfig {
            out_size,
            scale_min: 0.2,
            scale_max: 1.0,
            aspect_min: 3.0 / 4.0,
            aspect_max: 4.0 / 3.0,
            flip_prob: 0.5,
        }
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined value.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mirror an `[H, W, 3]` image left-right.
pub fn hflip(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let s = (y * w + x) * 3;
            let d = (y * w + (w - 1 - x)) * 3;
            data[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    Tensor::new(image.shape().to_vec(), data).unwrap()
}

/// Axis-aligned crop of an `[H, W, 3]` image.
pub fn crop(image: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if ch == 0 || cw == 0 || y0 + ch > h || x0 + cw > w {
        return Err(Error::contract(format!(
            "crop {y0},{x0} {ch}x{cw} outside {h}x{w}"
        )));
    }
    let src = image.data();
    let mut data = Vec::with_capacity(ch * cw * 3);
    for y in y0..y0 + ch {
        data.extend_from_slice(&src[(y * w + x0) * 3..(y * w + x0 + cw) * 3]);
    }
    Tensor::new(vec![ch, cw, 3], data)
}

/// Bilinear resize of an `[H, W, 3]` image with half-pixel centers. Output
/// values are convex combinations of input values, so the range is
/// preserved up to rounding.
pub fn resize_bilinear(image: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if oh == 0 || ow == 0 {
        return Err(Error::contract("resize target must be non-empty"));
    }
    let src = image.data();
    let mut data = vec![0.0; oh * ow * 3];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let p00 = src[(y0 * w + x0) * 3 + c];
                let p01 = src[(y0 * w + x1) * 3 + c];
                let p10 = src[(y1 * w + x0) * 3 + c];
                let p11 = src[(y1 * w + x1) * 3 + c];
                let top = p00 * (1.0 - wx) + p01 * wx;
                let bot = p10 * (1.0 - wx) + p11 * wx;
                data[(y * ow + x) * 3 + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(vec![oh, ow, 3], data)
}

/// Random resized crop followed by a horizontal flip, deterministic per
/// seed. Degenerate crop windows retry with a fresh sub-seed up to 10 times
/// before falling back to a center crop.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::contract(format!(
            "augment expects [H, W, 3], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let area = (h * w) as f64;

    let mut window = None;
    for attempt in 0..10u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, attempt + 1));
        let frac = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let aspect = (rng.gen_range(cfg.aspect_min.ln()..=cfg.aspect_max.ln())).exp();
        let target = frac * area;
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=(h - ch));
            let x0 = rng.gen_range(0..=(w - cw));
            window = Some((y0, x0, ch, cw));
            break;
        }
    }
    let (y0, x0, ch, cw) = window.unwrap_or_else(|| {
        let side = h.min(w);
        ((h - side) / 2, (w - side) / 2, side, side)
    });

    let cropped = crop(image, y0, x0, ch, cw)?;
    let resized = resize_bilinear(&cropped, cfg.out_size, cfg.out_size)?;
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 0));
    Ok(if rng.gen_bool(cfg.flip_prob) {
        hflip(&resized)
    } else {
        resized
    })
}
