use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{LabeledImage, CHANNELS, PLANE, SIDE};
use crate::error::{Error, Result};
use crate::layers::Rng;

/// Random mirror, zero padding and crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Zero pixels added on every side before cropping.
    pub pad: usize,
    /// Side of the square crop taken from the padded image.
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            pad: 4,
            crop: SIDE,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            pad: 0,
            crop: SIDE,
        }
    }

    pub fn padded_side(&self) -> usize {
        SIDE + 2 * self.pad
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.padded_side() {
            return Err(Error::Config(format!(
                "crop {} must lie in 1..={} for pad {}",
                self.crop,
                self.padded_side(),
                self.pad
            )));
        }
        Ok(())
    }
}

/// The random choices behind one augmented image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Crop origin in padded coordinates.
    pub dy: usize,
    pub dx: usize,
}

impl AugmentDraw {
    /// Flip with probability one half (when enabled), then a crop origin
    /// uniform over every valid position.
    pub fn sample(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let flip = cfg.flip && rng.gen_bool(0.5);
        let span = cfg.padded_side() - cfg.crop;
        let (dy, dx) = if span == 0 {
            (0, 0)
        } else {
            (rng.gen_range(0..=span), rng.gen_range(0..=span))
        };
        Self { flip, dy, dx }
    }

    /// Writes the `crop x crop` result for channel-major `src` into `out`.
    pub fn apply(&self, cfg: &AugmentConfig, src: &[f32], out: &mut [f32]) {
        let (pad, crop) = (cfg.pad as isize, cfg.crop);
        for c in 0..CHANNELS {
            let plane = &src[c * PLANE..(c + 1) * PLANE];
            for y in 0..crop {
                let sy = (y + self.dy) as isize - pad;
                for x in 0..crop {
                    let mut sx = (x + self.dx) as isize - pad;
                    let inside = (0..SIDE as isize).contains(&sy) && (0..SIDE as isize).contains(&sx);
                    out[c * crop * crop + y * crop + x] = if inside {
                        if self.flip {
                            sx = SIDE as isize - 1 - sx;
                        }
                        plane[sy as usize * SIDE + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Mirrors the image first, then pads and crops; the label is untouched.
pub fn augment(img: &LabeledImage, cfg: &AugmentConfig, rng: &mut Rng) -> LabeledImage {
    let draw = AugmentDraw::sample(cfg, rng);
    let mut pixels = vec![0.0; CHANNELS * cfg.crop * cfg.crop];
    draw.apply(cfg, &img.pixels, &mut pixels);
    LabeledImage {
        pixels,
        label: img.label,
        index: img.index,
    }
}

pub fn flip_horizontal(pixels: &[f32]) -> Vec<f32> {
    let mut out = pixels.to_vec();
    for row in out.chunks_exact_mut(SIDE) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image(seed: u64) -> LabeledImage {
        let mut rng = Rng::seed_from_u64(seed);
        LabeledImage {
            pixels: (0..CHANNELS * PLANE).map(|_| rng.gen::<f32>()).collect(),
            label: 3,
            index: 9,
        }
    }

    #[test]
    fn no_flip_no_pad_is_identity() {
        let img = image(1);
        let out = augment(&img, &AugmentConfig::none(), &mut Rng::seed_from_u64(0));
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = image(2);
        assert_eq!(flip_horizontal(&flip_horizontal(&img.pixels)), img.pixels);
        assert_ne!(flip_horizontal(&img.pixels), img.pixels);
    }

    #[test]
    fn forced_flip_matches_mirror() {
        let img = image(3);
        let cfg = AugmentConfig::none();
        let draw = AugmentDraw { flip: true, dy: 0, dx: 0 };
        let mut out = vec![0.0; img.pixels.len()];
        draw.apply(&cfg, &img.pixels, &mut out);
        assert_eq!(out, flip_horizontal(&img.pixels));
    }

    #[test]
    fn shifted_crop_moves_content_and_zero_fills() {
        let img = image(4);
        let cfg = AugmentConfig { flip: false, pad: 4, crop: 32 };
        let draw = AugmentDraw { flip: false, dy: 4, dx: 8 };
        let mut out = vec![0.0; img.pixels.len()];
        draw.apply(&cfg, &img.pixels, &mut out);
        // Output column x reads input column x + 4.
        assert_eq!(out[0], img.pixels[4]);
        assert_eq!(out[27], img.pixels[31]);
        assert_eq!(out[28], 0.0);
        // dy = pad leaves rows in place.
        assert_eq!(out[SIDE], img.pixels[SIDE + 4]);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let cfg = AugmentConfig::default();
        let mut rng = Rng::seed_from_u64(11);
        let mut counts = [[0usize; 9]; 9];
        let draws = 10_000;
        for _ in 0..draws {
            let d = AugmentDraw::sample(&cfg, &mut rng);
            counts[d.dy][d.dx] += 1;
        }
        let expected = draws as f64 / 81.0;
        let chi2: f64 = counts
            .iter()
            .flatten()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 80 degrees of freedom; the 0.999 quantile is about 124.8.
        assert!(chi2 < 124.8, "chi-square {chi2}");
    }

    #[test]
    fn crop_larger_than_padded_rejected() {
        assert!(AugmentConfig { flip: false, pad: 0, crop: 33 }.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
