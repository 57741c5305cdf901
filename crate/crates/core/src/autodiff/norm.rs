//! Fused batch normalization over channel axis 1.

use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-channel minibatch statistics (biased variance) and the number of
/// elements each was computed over.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub count: usize,
}

struct Layout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl Layout {
    fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "batch norm needs a channel axis".into(),
            });
        }
        Ok(Self {
            outer: shape[0],
            channels: shape[1],
            inner: shape[2..].iter().product(),
        })
    }

    /// Visits every element index of channel `c`.
    fn each(&self, c: usize, mut f: impl FnMut(usize)) {
        for o in 0..self.outer {
            let base = (o * self.channels + c) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }
}

fn check_affine<F: Element>(x: &[usize], gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<()> {
    for p in [gamma, beta] {
        if p.shape() != [x[1]] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: x.to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl<'g, F: Element> Var<'g, F> {
    /// Normalizes with minibatch statistics, then applies `gamma * x + beta`.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, F>,
        beta: Var<'g, F>,
        eps: f64,
    ) -> Result<(Var<'g, F>, BatchStats<F>)> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        check_affine(x.shape(), &gv, &bv)?;
        if x.shape()[0] < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in train mode needs a minibatch of at least 2".into(),
            ));
        }
        let lay = Layout::of(x.shape())?;
        let count = lay.outer * lay.inner;
        let xd = x.data();
        let mut mean = vec![F::zero(); lay.channels];
        let mut var = vec![F::zero(); lay.channels];
        let mut invstd = vec![F::zero(); lay.channels];
        for c in 0..lay.channels {
            let mut s = 0.0f64;
            lay.each(c, |i| s += xd[i].to_f64_lossy());
            let m = s / count as f64;
            let mut ss = 0.0f64;
            lay.each(c, |i| {
                let d = xd[i].to_f64_lossy() - m;
                ss += d * d;
            });
            let v = ss / count as f64;
            mean[c] = F::from_f64_lossy(m);
            var[c] = F::from_f64_lossy(v);
            invstd[c] = F::from_f64_lossy(1.0 / (v + eps).sqrt());
        }
        let mut out = vec![F::zero(); x.numel()];
        for c in 0..lay.channels {
            let (m, s, ga, be) = (mean[c], invstd[c], gv.data()[c], bv.data()[c]);
            lay.each(c, |i| out[i] = ga * ((xd[i] - m) * s) + be);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count,
        };

        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let (x, gamma, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
            let lay = Layout::of(x.shape()).expect("validated in forward");
            let xd = x.data();
            let mcount = F::from_f64_lossy(count as f64);
            let mut dx = args.needs[0].then(|| vec![F::zero(); x.numel()]);
            let mut dgamma = vec![F::zero(); lay.channels];
            let mut dbeta = vec![F::zero(); lay.channels];
            for c in 0..lay.channels {
                let (m, s) = (mean[c], invstd[c]);
                let (mut sum_g, mut sum_gx) = (F::zero(), F::zero());
                lay.each(c, |i| {
                    sum_g = sum_g + g[i];
                    sum_gx = sum_gx + g[i] * (xd[i] - m) * s;
                });
                dgamma[c] = sum_gx;
                dbeta[c] = sum_g;
                if let Some(dx) = dx.as_mut() {
                    let k = gamma.data()[c] * s / mcount;
                    lay.each(c, |i| {
                        let xhat = (xd[i] - m) * s;
                        dx[i] = k * (mcount * g[i] - sum_g - xhat * sum_gx);
                    });
                }
            }
            let ch = vec![lay.channels];
            vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                Some(Tensor::from_parts(ch.clone(), dgamma)),
                Some(Tensor::from_parts(ch, dbeta)),
            ]
        });
        let y = self
            .graph
            .record("batch_norm_train", value, &[self.id, gamma.id, beta.id], backward)?;
        Ok((y, stats))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, F>,
        beta: Var<'g, F>,
        mean: &[F],
        var: &[F],
        eps: f64,
    ) -> Result<Var<'g, F>> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        check_affine(x.shape(), &gv, &bv)?;
        let lay = Layout::of(x.shape())?;
        if mean.len() != lay.channels || var.len() != lay.channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_eval",
                lhs: x.shape().to_vec(),
                rhs: vec![mean.len()],
            });
        }
        let mean = mean.to_vec();
        let invstd: Vec<F> = var
            .iter()
            .map(|&v| F::from_f64_lossy(1.0 / (v.to_f64_lossy() + eps).sqrt()))
            .collect();
        let xd = x.data();
        let mut out = vec![F::zero(); x.numel()];
        for c in 0..lay.channels {
            let (m, s, ga, be) = (mean[c], invstd[c], gv.data()[c], bv.data()[c]);
            lay.each(c, |i| out[i] = ga * ((xd[i] - m) * s) + be);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let (x, gamma, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
            let lay = Layout::of(x.shape()).expect("validated in forward");
            let xd = x.data();
            let mut dx = vec![F::zero(); x.numel()];
            let mut dgamma = vec![F::zero(); lay.channels];
            let mut dbeta = vec![F::zero(); lay.channels];
            for c in 0..lay.channels {
                let (m, s, ga) = (mean[c], invstd[c], gamma.data()[c]);
                lay.each(c, |i| {
                    dgamma[c] = dgamma[c] + g[i] * (xd[i] - m) * s;
                    dbeta[c] = dbeta[c] + g[i];
                    dx[i] = g[i] * ga * s;
                });
            }
            let ch = vec![lay.channels];
            vec![
                Some(Tensor::from_parts(x.shape().to_vec(), dx)),
                Some(Tensor::from_parts(ch.clone(), dgamma)),
                Some(Tensor::from_parts(ch, dbeta)),
            ]
        });
        self.graph
            .record("batch_norm_eval", value, &[self.id, gamma.id, beta.id], backward)
    }
}
