use std::time::Instant;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::architectures::Predictor;
use crate::data::{sequential_batches, Dataset, CHANNELS, SIDE};
use crate::error::{Error, Result};
use crate::layers::Rng;
use crate::tensor::Tensor;

/// Top-1 error in percent over the whole set, without augmentation.
pub fn evaluate(net: &mut dyn Predictor, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut wrong = 0usize;
    for_each_logits(net, ds, batch_size, |labels, logits| {
        for (i, &l) in labels.iter().enumerate() {
            if argmax(logits.row(i)) != l {
                wrong += 1;
            }
        }
    })?;
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

fn for_each_logits(
    net: &mut dyn Predictor,
    ds: &Dataset,
    batch_size: usize,
    mut f: impl FnMut(&[usize], &Tensor<f32>),
) -> Result<()> {
    if net.num_classes() != ds.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "network predicts {} classes, dataset has {}",
            net.num_classes(),
            ds.num_classes()
        )));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    for idx in sequential_batches(&order, batch_size) {
        let batch = ds.batch(&idx, None)?;
        let logits = net.predict(&batch.images, &batch.labels, &batch.indices)?;
        f(&batch.labels, &logits);
    }
    Ok(())
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax probability of one class, split by whether the image truly
/// belongs to it. Each population's histogram sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHistogram {
    pub class_id: usize,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub positive_mean: f64,
    pub negative_mean: f64,
    pub positive_count: usize,
    pub negative_count: usize,
}

impl PredictionHistogram {
    pub fn bins(&self) -> usize {
        self.positive.len()
    }

    /// `bin_lo,bin_hi,positive,negative`, one row per bin.
    pub fn to_csv(&self) -> String {
        let n = self.bins();
        let mut out = String::from("bin_lo,bin_hi,positive,negative\n");
        for b in 0..n {
            out.push_str(&format!(
                "{},{},{},{}\n",
                b as f64 / n as f64,
                (b + 1) as f64 / n as f64,
                self.positive[b],
                self.negative[b]
            ));
        }
        out
    }
}

pub fn prediction_histogram(
    net: &mut dyn Predictor,
    ds: &Dataset,
    class_id: usize,
    bins: usize,
    batch_size: usize,
) -> Result<PredictionHistogram> {
    if class_id >= ds.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} out of {} classes",
            ds.num_classes()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let mut pos = vec![0usize; bins];
    let mut neg = vec![0usize; bins];
    let (mut pos_sum, mut neg_sum) = (0.0f64, 0.0f64);
    for_each_logits(net, ds, batch_size, |labels, logits| {
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let p = (row[class_id] as f64 - max).exp() / z;
            let bin = ((p * bins as f64) as usize).min(bins - 1);
            if l == class_id {
                pos[bin] += 1;
                pos_sum += p;
            } else {
                neg[bin] += 1;
                neg_sum += p;
            }
        }
    })?;
    let (np, nn) = (pos.iter().sum::<usize>(), neg.iter().sum::<usize>());
    if np == 0 {
        return Err(Error::InvalidArgument(format!("no image of class {class_id} in the dataset")));
    }
    let norm = |counts: &[usize], total: usize| -> Vec<f64> {
        counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
    };
    Ok(PredictionHistogram {
        class_id,
        positive: norm(&pos, np),
        negative: norm(&neg, nn),
        positive_mean: pos_sum / np as f64,
        negative_mean: if nn == 0 { 0.0 } else { neg_sum / nn as f64 },
        positive_count: np,
        negative_count: nn,
    })
}

/// Median wall-clock seconds of `repeats` forwards of a random batch,
/// after one untimed warm-up forward.
pub fn measure_inference_time(net: &mut dyn Predictor, batch_size: usize, repeats: usize) -> Result<f64> {
    if batch_size == 0 || repeats == 0 {
        return Err(Error::InvalidArgument("batch_size and repeats must be positive".into()));
    }
    let mut rng = Rng::seed_from_u64(0);
    let images = Tensor::from_fn(&[batch_size, CHANNELS, SIDE, SIDE], |_| {
        let v: f32 = StandardNormal.sample(&mut rng);
        v
    });
    let labels = vec![0; batch_size];
    let indices: Vec<usize> = (0..batch_size).collect();
    net.predict(&images, &labels, &indices)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        net.predict(&images, &labels, &indices)?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

/// Middle order statistic, or the mean of the two middle values.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{StubKind, StubModel};
    use crate::data::make_synthetic;

    #[test]
    fn oracle_is_perfect_and_constant_is_chance() {
        let ds = make_synthetic(40, 4, 0.2, 1).unwrap();
        assert_eq!(evaluate(&mut StubModel::new(StubKind::Oracle, 4), &ds, 16).unwrap(), 0.0);
        // A constant stub always predicts class 0.
        let zeros = ds.labels().iter().filter(|&&l| l == 0).count();
        let err = evaluate(&mut StubModel::new(StubKind::Constant, 4), &ds, 16).unwrap();
        assert!((err - 100.0 * (40 - zeros) as f64 / 40.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_histogram_is_extreme() {
        let ds = make_synthetic(50, 5, 0.2, 2).unwrap();
        let h = prediction_histogram(&mut StubModel::new(StubKind::Oracle, 5), &ds, 1, 10, 16).unwrap();
        assert_eq!(h.positive[9], 1.0);
        assert_eq!(h.negative[0], 1.0);
        assert!((h.positive.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.to_csv().lines().count(), 11);
    }

    #[test]
    fn histogram_requires_positive_images() {
        let ds = make_synthetic(3, 50, 0.2, 2).unwrap();
        let missing = (0..50).find(|c| !ds.labels().contains(c)).unwrap();
        assert!(prediction_histogram(&mut StubModel::new(StubKind::Oracle, 50), &ds, missing, 4, 8).is_err());
    }

    #[test]
    fn median_order_statistic() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
