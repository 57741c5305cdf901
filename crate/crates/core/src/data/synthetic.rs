//! Class-structured synthetic images for fast experiments.
//!
//! Each class owns one or more smooth prototype patterns (its modes). A
//! sample is one mode of its class plus up to two down-weighted modes of
//! other classes, circularly shifted, plus pixel noise. `difficulty` in
//! `[0, 1]` scales the distractor weights, the shift range and the noise
//! together.

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, CHANNELS, IMAGE_LEN, PLANE, SIDE};
use crate::error::{Error, Result};
use crate::layers::Rng;

const WAVES: usize = 3;
const PIXEL_SCALE: f32 = 40.0;

fn prototype(rng: &mut Rng) -> Vec<f32> {
    let mut img = vec![0.0f32; IMAGE_LEN];
    for c in 0..CHANNELS {
        let plane = &mut img[c * PLANE..(c + 1) * PLANE];
        for _ in 0..WAVES {
            let fy = rng.gen_range(0..4) as f32;
            let fx = rng.gen_range(0..4) as f32;
            let fx = if fy == 0.0 && fx == 0.0 { 1.0 } else { fx };
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            let amp = rng.gen_range(0.5..1.0f32);
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let t = std::f32::consts::TAU * (fy * y as f32 + fx * x as f32) / SIDE as f32;
                    plane[y * SIDE + x] += amp * (t + phase).sin();
                }
            }
        }
    }
    let rms = (img.iter().map(|v| v * v).sum::<f32>() / IMAGE_LEN as f32).sqrt();
    img.iter_mut().for_each(|v| *v /= rms);
    img
}

/// `n` images over `num_classes` classes; the same arguments always give
/// the same dataset. Difficulty 0 gives noisy copies of disjoint prototypes.
pub fn make_synthetic(n: usize, num_classes: usize, difficulty: f64, seed: u64) -> Result<Dataset> {
    make_synthetic_modes(n, num_classes, 1, difficulty, seed)
}

/// Like [`make_synthetic`] with `modes` prototypes per class, so that a
/// class is a union of unrelated patterns. One mode reproduces
/// [`make_synthetic`] exactly.
pub fn make_synthetic_modes(n: usize, num_classes: usize, modes: usize, difficulty: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || num_classes == 0 || modes == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs n >= 1, C >= 1 and at least one mode".into(),
        ));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::InvalidArgument(format!("difficulty must lie in [0, 1], got {difficulty}")));
    }
    let d = difficulty as f32;
    let mut rng = Rng::seed_from_u64(seed);
    // Class-major: modes of class c sit at c * modes ..
    let protos: Vec<Vec<f32>> = (0..num_classes * modes).map(|_| prototype(&mut rng)).collect();
    let pick = |rng: &mut Rng, class: usize| -> usize {
        if modes == 1 {
            class
        } else {
            class * modes + rng.gen_range(0..modes)
        }
    };
    let max_shift = (3.0 * d).round() as i64;
    let noise = 0.25 + 0.75 * d;

    let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    let mut mix = vec![0.0f32; IMAGE_LEN];
    for _ in 0..n {
        let label = rng.gen_range(0..num_classes);
        mix.copy_from_slice(&protos[pick(&mut rng, label)]);
        if num_classes > 1 {
            for _ in 0..2 {
                let mut other = rng.gen_range(0..num_classes - 1);
                if other >= label {
                    other += 1;
                }
                let w = d * rng.gen::<f32>();
                let other = pick(&mut rng, other);
                for (m, p) in mix.iter_mut().zip(&protos[other]) {
                    *m += w * p;
                }
            }
        }
        let sy = rng.gen_range(-max_shift..=max_shift);
        let sx = rng.gen_range(-max_shift..=max_shift);
        for c in 0..CHANNELS {
            for y in 0..SIDE {
                let yy = (y as i64 + sy).rem_euclid(SIDE as i64) as usize;
                for x in 0..SIDE {
                    let xx = (x as i64 + sx).rem_euclid(SIDE as i64) as usize;
                    let eps: f32 = StandardNormal.sample(&mut rng);
                    let v = mix[c * PLANE + yy * SIDE + xx] + noise * eps;
                    pixels.push((128.0 + PIXEL_SCALE * v).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(num_classes, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let a = make_synthetic(20, 4, 0.5, 3).unwrap();
        assert_eq!(a, make_synthetic(20, 4, 0.5, 3).unwrap());
        assert_ne!(a, make_synthetic(20, 4, 0.5, 4).unwrap());
    }

    #[test]
    fn labels_roughly_uniform() {
        let ds = make_synthetic(2000, 10, 0.3, 1).unwrap();
        // Binomial(2000, 0.1): sd about 13.4; allow 5 sd.
        for c in ds.class_counts() {
            assert!((c as f64 - 200.0).abs() < 67.0, "{c}");
        }
    }

    #[test]
    fn one_mode_matches_plain_generator() {
        assert_eq!(make_synthetic_modes(30, 5, 1, 0.7, 9).unwrap(), make_synthetic(30, 5, 0.7, 9).unwrap());
        assert_ne!(make_synthetic_modes(30, 5, 3, 0.7, 9).unwrap(), make_synthetic(30, 5, 0.7, 9).unwrap());
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(make_synthetic_modes(5, 3, 0, 0.2, 0).is_err());
        assert!(make_synthetic(0, 3, 0.0, 0).is_err());
        assert!(make_synthetic(3, 3, 1.5, 0).is_err());
    }
}
