//! Image decoding, resizing, single-op random augmentation, and
//! normalization into `C×H×W` float tensors.

use std::path::Path;

use base64::Engine;
use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::table::{Cell, ColumnModality};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
const MAX_ROTATION_DEG: f64 = 30.0;
const MAX_FACTOR_DELTA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageNorm {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for ImageNorm {
    fn default() -> Self {
        ImageNorm {
            mean: [0.5; CHANNELS],
            std: [0.5; CHANNELS],
        }
    }
}

/// The augmentation ops; one is drawn uniformly per image per view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    Identity,
    HorizontalFlip,
    /// Degrees, counter-clockwise.
    Rotate(f64),
    /// Multiplicative factor.
    Brightness(f64),
    /// Blend factor around the mean intensity.
    Contrast(f64),
}

impl AugmentOp {
    /// Uniform op, then uniform strength in `[0, 1]` with a random sign.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let op = rng.random_range(0..5);
        let strength: f64 = rng.random();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        match op {
            0 => AugmentOp::Identity,
            1 => AugmentOp::HorizontalFlip,
            2 => AugmentOp::Rotate(sign * MAX_ROTATION_DEG * strength),
            3 => AugmentOp::Brightness(1.0 + sign * MAX_FACTOR_DELTA * strength),
            _ => AugmentOp::Contrast(1.0 + sign * MAX_FACTOR_DELTA * strength),
        }
    }

    /// Applies the op to a `C×H×W` image with values in `[0, 1]`.
    pub fn apply(self, img: &mut Tensor) {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let d = img.data_mut();
        match self {
            AugmentOp::Identity => {}
            AugmentOp::HorizontalFlip => {
                for row in d.chunks_mut(w) {
                    row.reverse();
                }
            }
            AugmentOp::Rotate(deg) => {
                let src = d.to_vec();
                let (s, co) = deg.to_radians().sin_cos();
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                for y in 0..h {
                    for x in 0..w {
                        // Inverse-map each output pixel into the source.
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        let sx = (co * dx - s * dy + cx).round();
                        let sy = (s * dx + co * dy + cy).round();
                        let inside =
                            sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h;
                        for ch in 0..c {
                            d[ch * h * w + y * w + x] = if inside {
                                src[ch * h * w + sy as usize * w + sx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
            AugmentOp::Brightness(f) => {
                for v in d.iter_mut() {
                    *v = (*v * f).clamp(0.0, 1.0);
                }
            }
            AugmentOp::Contrast(f) => {
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                for v in d.iter_mut() {
                    *v = (mean + f * (*v - mean)).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Decodes the image a cell refers to. Paths are resolved against `root`.
pub fn load_image(
    cell: &Cell,
    modality: ColumnModality,
    root: Option<&Path>,
) -> Result<RgbImage, String> {
    let bytes = match (modality, cell) {
        (ColumnModality::ImagePath, Cell::Text(p)) => {
            let path = Path::new(p.trim());
            let full = match root {
                Some(r) if path.is_relative() => r.join(path),
                _ => path.to_path_buf(),
            };
            std::fs::read(&full).map_err(|e| format!("{}: {e}", full.display()))?
        }
        (ColumnModality::ImageBase64, Cell::Text(s)) => base64::engine::general_purpose::STANDARD
            .decode(s.trim())
            .map_err(|e| format!("invalid base64: {e}"))?,
        (_, Cell::Bytes(b)) => b.clone(),
        (m, c) => return Err(format!("cell {c:?} cannot hold a {m:?} image")),
    };
    image::load_from_memory(&bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| e.to_string())
}

/// Resizes to `size×size`, optionally applies one sampled augmentation,
/// scales to `[0, 1]` and normalizes per channel.
pub fn process_image<R: Rng + ?Sized>(
    img: &RgbImage,
    size: usize,
    norm: &ImageNorm,
    augment: bool,
    rng: &mut R,
) -> Tensor {
    let resized = if img.width() as usize == size && img.height() as usize == size {
        img.clone()
    } else {
        image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    };
    let hw = size * size;
    let mut data = vec![0.0; CHANNELS * hw];
    for (i, px) in resized.pixels().enumerate() {
        for ch in 0..CHANNELS {
            data[ch * hw + i] = px.0[ch] as f64 / 255.0;
        }
    }
    let mut t = Tensor::new(vec![CHANNELS, size, size], data);
    if augment {
        AugmentOp::sample(rng).apply(&mut t);
    }
    for ch in 0..CHANNELS {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        for v in &mut t.data_mut()[ch * hw..(ch + 1) * hw] {
            *v = (*v - m) / s;
        }
    }
    t
}

pub(crate) fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gray_image_normalizes_to_zero() {
        let img = RgbImage::from_pixel(8, 8, image::Rgb([128, 128, 128]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let norm = ImageNorm {
            mean: [128.0 / 255.0; 3],
            std: [0.5; 3],
        };
        let t = process_image(&img, 8, &norm, false, &mut rng);
        assert!(t.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn resize_contract() {
        let img = RgbImage::from_pixel(64, 32, image::Rgb([10, 20, 30]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = process_image(&img, 32, &ImageNorm::default(), false, &mut rng);
        assert_eq!(t.shape(), &[3, 32, 32]);
    }

    #[test]
    fn augmentation_is_seeded() {
        let img = RgbImage::from_fn(16, 16, |x, y| {
            image::Rgb([(x * 16) as u8, (y * 16) as u8, 7])
        });
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..8)
                .map(|_| process_image(&img, 16, &ImageNorm::default(), true, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut t = Tensor::new(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let orig = t.clone();
        AugmentOp::HorizontalFlip.apply(&mut t);
        assert_eq!(t.data(), &[3., 2., 1., 6., 5., 4.]);
        AugmentOp::HorizontalFlip.apply(&mut t);
        assert_eq!(t, orig);
        AugmentOp::Rotate(0.0).apply(&mut t);
        assert_eq!(t, orig);
    }

    #[test]
    fn png_round_trip_decodes() {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3]));
        let cell = Cell::Bytes(encode_png(&img));
        let back = load_image(&cell, ColumnModality::ImageBytes, None).unwrap();
        assert_eq!(back, img);
        assert!(load_image(
            &Cell::Bytes(vec![1, 2, 3]),
            ColumnModality::ImageBytes,
            None
        )
        .is_err());
    }
}
