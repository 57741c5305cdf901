//! Image datasets, augmentation, batching and the teacher-logits store.
//!
//! Images are kept as raw `u8` pixels in channel-major `3 x 32 x 32` layout
//! and normalized per channel on access. Normalization statistics belong to
//! the dataset; a test split borrows them from its training split.

mod augment;
mod cifar;
mod logits_store;
mod synthetic;

pub use augment::{augment, flip_horizontal, AugmentConfig, AugmentDraw};
pub use cifar::{cifar_to_bytes, load_cifar, load_cifar_splits, parse_cifar, CifarVariant};
pub use logits_store::{export_teacher_logits, TeacherLogitsStore};
pub use synthetic::{make_synthetic, make_synthetic_modes};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::layers::{seeded_rng, Rng};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_LEN: usize = CHANNELS * PLANE;

/// Per-channel affine normalization `(p - mean) / std` on `[0, 255]` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; CHANNELS],
    pub std: [f32; CHANNELS],
}

impl Normalization {
    /// Statistics of channel-major images packed back to back.
    pub fn from_pixels(pixels: &[u8]) -> Self {
        let mut sum = [0f64; CHANNELS];
        let mut sq = [0f64; CHANNELS];
        for img in pixels.chunks_exact(IMAGE_LEN) {
            for c in 0..CHANNELS {
                for &p in &img[c * PLANE..(c + 1) * PLANE] {
                    let p = p as f64;
                    sum[c] += p;
                    sq[c] += p * p;
                }
            }
        }
        let n = (pixels.len() / CHANNELS).max(1) as f64;
        let mut out = Self::identity();
        for c in 0..CHANNELS {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            out.mean[c] = mean as f32;
            out.std[c] = if var > 0.0 { var.sqrt() as f32 } else { 1.0 };
        }
        out
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    pub fn apply(&self, raw: &[u8], out: &mut [f32]) {
        for c in 0..CHANNELS {
            let (m, s) = (self.mean[c], self.std[c]);
            let range = c * PLANE..(c + 1) * PLANE;
            for (o, &p) in out[range.clone()].iter_mut().zip(&raw[range]) {
                *o = (p as f32 - m) / s;
            }
        }
    }
}

/// One normalized image with its label and position in the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `3 x 32 x 32`, channel-major.
    pub pixels: Vec<f32>,
    pub label: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    coarse_labels: Option<Vec<u8>>,
    norm: Normalization,
}

impl Dataset {
    /// Normalization is computed from `pixels` themselves.
    pub fn new(num_classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if labels.is_empty() || pixels.len() != labels.len() * IMAGE_LEN {
            return Err(Error::InvalidArgument(format!(
                "{} pixel bytes do not hold {} images of {IMAGE_LEN} bytes",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let norm = Normalization::from_pixels(&pixels);
        Ok(Self {
            num_classes,
            pixels,
            labels,
            coarse_labels: None,
            norm,
        })
    }

    pub fn with_coarse_labels(mut self, coarse: Vec<u8>) -> Result<Self> {
        if coarse.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} coarse labels for {} images",
                coarse.len(),
                self.len()
            )));
        }
        self.coarse_labels = Some(coarse);
        Ok(self)
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        self.norm = norm;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn coarse_labels(&self) -> Option<&[u8]> {
        self.coarse_labels.as_deref()
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn image(&self, i: usize) -> LabeledImage {
        let mut pixels = vec![0.0; IMAGE_LEN];
        self.norm.apply(self.raw_image(i), &mut pixels);
        LabeledImage {
            pixels,
            label: self.labels[i],
            index: i,
        }
    }

    /// Images at `indices`, re-indexed from zero, with normalization
    /// recomputed from the selection.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_LEN);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of {} images", self.len())));
            }
            pixels.extend_from_slice(self.raw_image(i));
            labels.push(self.labels[i]);
        }
        let mut out = Self::new(self.num_classes, pixels, labels)?;
        if let Some(c) = &self.coarse_labels {
            out.coarse_labels = Some(indices.iter().map(|&i| c[i]).collect());
        }
        Ok(out)
    }

    /// Splits into the first `n` images and the rest, the second half using
    /// the first half's normalization.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let a = self.subset(&head)?;
        let b = self.subset(&tail)?.with_normalization(a.norm);
        Ok((a, b))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Assembles the images at `indices` into a `(B, 3, 32, 32)` batch,
    /// augmenting each image when `augment` is given.
    pub fn batch(&self, indices: &[usize], augment: Option<(&AugmentConfig, &mut Rng)>) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut data = vec![0.0f32; indices.len() * IMAGE_LEN];
        let mut scratch = vec![0.0f32; IMAGE_LEN];
        let mut augment = augment;
        for (slot, &i) in data.chunks_exact_mut(IMAGE_LEN).zip(indices) {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of {} images", self.len())));
            }
            match augment.as_mut() {
                None => self.norm.apply(self.raw_image(i), slot),
                Some((cfg, rng)) => {
                    if cfg.crop != SIDE {
                        return Err(Error::Config(format!(
                            "batches need {SIDE}x{SIDE} crops, got {}",
                            cfg.crop
                        )));
                    }
                    self.norm.apply(self.raw_image(i), &mut scratch);
                    let draw = AugmentDraw::sample(cfg, rng);
                    draw.apply(cfg, &scratch, slot);
                }
            }
        }
        Ok(Batch {
            images: Tensor::new(&[indices.len(), CHANNELS, SIDE, SIDE], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }
}

/// A minibatch with the dataset positions it came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stream id of the shuffling generator; see [`seeded_rng`].
pub const SHUFFLE_STREAM: u64 = 1;

/// Shuffled minibatches of `0..n` for one epoch, a pure function of
/// `(n, batch_size, seed, epoch)`.
///
/// Every index appears exactly once. A trailing batch of a single image is
/// folded into the previous batch, since batch statistics need two samples.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, SHUFFLE_STREAM, epoch as u64));
    sequential_batches(&order, batch_size)
}

/// `order` cut into consecutive chunks of `batch_size`, with the same
/// single-image folding as [`epoch_batches`].
pub fn sequential_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}
