//! Resize, normalization and train-time augmentation.

use crome_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::RawImage;
use crate::error::{CromeError, Result};

pub const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub random_crop: bool,
    pub hflip: bool,
    /// Smallest crop side as a fraction of the source side.
    pub crop_min_scale: f64,
}

impl PreprocessSpec {
    /// Reference-scale pipeline: 224 pixels with crop and flip.
    pub fn full_scale() -> Self {
        Self {
            target_size: 224,
            mean: CLIP_MEAN,
            std: CLIP_STD,
            random_crop: true,
            hflip: true,
            crop_min_scale: 0.5,
        }
    }

    /// Toy pipeline. Flipping would swap left/right answers and cropping can
    /// cut objects out of the scene, so both stay off.
    pub fn toy(target_size: usize) -> Self {
        Self { target_size, random_crop: false, hflip: false, ..Self::full_scale() }
    }

    pub fn normalize(&self, level: f64, channel: usize) -> f64 {
        (level - self.mean[channel]) / self.std[channel]
    }
}

/// Bilinear resize of a `[h, w, c]` float image, half-pixel centers.
fn resize(src: &[f64], h: usize, w: usize, c: usize, out: usize) -> Vec<f64> {
    if h == out && w == out {
        return src.to_vec();
    }
    let mut dst = vec![0.0; out * out * c];
    let sy = h as f64 / out as f64;
    let sx = w as f64 / out as f64;
    let coord = |d: usize, s: f64, n: usize| {
        let f = ((d as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    for y in 0..out {
        let (y0, y1, fy) = coord(y, sy, h);
        for x in 0..out {
            let (x0, x1, fx) = coord(x, sx, w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                dst[(y * out + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    dst
}

/// Returns a `[S, S, C]` tensor of normalized values.
pub fn preprocess(raw: &RawImage, spec: &PreprocessSpec, mode: Mode, seed: u64) -> Result<Tensor> {
    let (h, w, c) = (raw.height, raw.width, raw.channels);
    if c != 3 {
        return Err(CromeError::Data(format!("expected 3 channels, got {c}")));
    }
    if h < spec.target_size || w < spec.target_size {
        return Err(CromeError::Contract(format!(
            "image {h}x{w} smaller than target {}",
            spec.target_size
        )));
    }
    let mut pixels: Vec<f64> = raw.levels.iter().map(|&v| v as f64 / 255.0).collect();
    let (mut ph, mut pw) = (h, w);
    if mode == Mode::Train && (spec.random_crop || spec.hflip) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if spec.random_crop {
            let min_side = ((h.min(w) as f64 * spec.crop_min_scale).ceil() as usize)
                .max(spec.target_size)
                .min(h.min(w));
            let side = rng.random_range(min_side..=h.min(w));
            let oy = rng.random_range(0..=h - side);
            let ox = rng.random_range(0..=w - side);
            let mut crop = Vec::with_capacity(side * side * c);
            for y in oy..oy + side {
                crop.extend_from_slice(&pixels[(y * w + ox) * c..(y * w + ox + side) * c]);
            }
            pixels = crop;
            ph = side;
            pw = side;
        }
        if spec.hflip && rng.random_bool(0.5) {
            for y in 0..ph {
                let row = &mut pixels[y * pw * c..(y + 1) * pw * c];
                for x in 0..pw / 2 {
                    for ch in 0..c {
                        row.swap(x * c + ch, (pw - 1 - x) * c + ch);
                    }
                }
            }
        }
    }
    let mut out = resize(&pixels, ph, pw, c, spec.target_size);
    for (i, v) in out.iter_mut().enumerate() {
        *v = spec.normalize(*v, i % c);
    }
    Ok(Tensor::new(vec![spec.target_size, spec.target_size, c], out)?)
}
