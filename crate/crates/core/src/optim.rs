//! SGD with momentum, coupled weight decay and step learning-rate schedules.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl SgdConfig {
    /// lr 0.1, momentum 0.9, weight decay 1e-4, divided by 10 at 40% and
    /// 80% of training.
    pub fn student(epochs: usize) -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: scaled_milestones(epochs),
            decay_factor: 0.1,
        }
    }

    /// Same schedule as the student with initial lr 1e-3.
    pub fn discriminator(epochs: usize) -> Self {
        Self {
            lr0: 1e-3,
            ..Self::student(epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Config(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }

    /// `lr0 * decay_factor ^ (number of milestones <= epoch)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count() as i32;
        self.lr0 * self.decay_factor.powi(passed)
    }
}

/// Milestones at 40% and 80% of `epochs` (80/160 for 200 epochs).
pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    let mut m: Vec<usize> = [0.4, 0.8]
        .iter()
        .map(|f| ((epochs as f64 * f).round() as usize).max(1))
        .collect();
    m.dedup();
    m
}

/// One update of a single tensor:
/// `v <- momentum * v + (grad + wd * param)`, `param <- param - lr * v`.
pub fn sgd_update<F: Element>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    velocity: &mut Tensor<F>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for other in [grad, &*velocity] {
        if other.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_update",
                lhs: param.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    let (lr, mu, wd) = (
        F::from_f64_lossy(lr),
        F::from_f64_lossy(momentum),
        F::from_f64_lossy(weight_decay),
    );
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Optimizer state for one network: velocities keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub cfg: SgdConfig,
    velocity: HashMap<String, Tensor<F>>,
    epoch: usize,
    lr: f64,
}

impl<F: Element> Sgd<F> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        let lr = cfg.lr_at_epoch(0);
        Ok(Self {
            cfg,
            velocity: HashMap::new(),
            epoch: 0,
            lr,
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.lr = self.cfg.lr_at_epoch(epoch);
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<F>> {
        self.velocity.get(name)
    }

    /// Applies one update to every parameter of `m` from its `grad` field.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, m: &mut impl Module<F>) -> Result<()> {
        let mut bad: Option<String> = None;
        m.visit_params(&mut |p| {
            if bad.is_none() && !p.grad.is_finite() {
                bad = Some(p.name().to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
        let (lr, mu, wd) = (self.lr, self.cfg.momentum, self.cfg.weight_decay);
        let mut res = Ok(());
        let velocity = &mut self.velocity;
        m.visit_params_mut(&mut |p| {
            if res.is_err() {
                return;
            }
            let v = velocity
                .entry(p.name().to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            res = sgd_update(&mut p.value, &p.grad, v, lr, mu, wd);
        });
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Param;

    fn cfg(lr0: f64, momentum: f64, wd: f64) -> SgdConfig {
        SgdConfig {
            lr0,
            momentum,
            weight_decay: wd,
            milestones: vec![80, 160],
            decay_factor: 0.1,
        }
    }

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn vanilla_step() {
        let mut m = One(Param::new("w", Tensor::zeros(&[2])));
        m.0.grad = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut opt = Sgd::new(cfg(0.1, 0.0, 0.0)).unwrap();
        opt.step(&mut m).unwrap();
        assert_eq!(m.0.value.data(), &[-0.1, -0.2]);
    }

    #[test]
    fn zero_grad_decays_velocity_only() {
        let mut p = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let mut v = Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        sgd_update(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -1.0]);
        let mut v = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut p2 = Tensor::zeros(&[2]);
        sgd_update(&mut p2, &g, &mut v, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(v.data(), &[0.9, 1.8]);
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        // v1 = g, v2 = 0.9 g + g = 1.9 g; total displacement lr * g * (1 + 1.9)
        let (lr, g) = (0.05, 0.7);
        let mut p = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        let gt = Tensor::from_f64(&[1], &[g]).unwrap();
        for _ in 0..2 {
            sgd_update(&mut p, &gt, &mut v, lr, 0.9, 0.0).unwrap();
        }
        assert!((p.data()[0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut m = One(Param::new("block.weight", Tensor::zeros(&[1])));
        m.0.grad.data_mut()[0] = f64::INFINITY;
        let mut opt = Sgd::new(cfg(0.1, 0.9, 0.0)).unwrap();
        let err = opt.step(&mut m).unwrap_err();
        assert!(err.to_string().contains("block.weight"));
        assert_eq!(m.0.value.data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(sgd_update(&mut p, &Tensor::zeros(&[3]), &mut v, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn step_schedule() {
        let c = cfg(0.1, 0.9, 1e-4);
        assert_eq!(c.lr_at_epoch(0), 0.1);
        assert!((c.lr_at_epoch(79) - 0.1).abs() < 1e-15);
        assert!((c.lr_at_epoch(80) - 0.01).abs() < 1e-15);
        assert!((c.lr_at_epoch(160) - 0.001).abs() < 1e-15);
        let flat = SgdConfig { milestones: vec![], ..c };
        assert_eq!(flat.lr_at_epoch(1000), 0.1);
    }

    #[test]
    fn milestones_scale_with_epochs() {
        assert_eq!(scaled_milestones(200), vec![80, 160]);
        assert_eq!(scaled_milestones(50), vec![20, 40]);
        assert_eq!(SgdConfig::discriminator(200).lr0, 1e-3);
        let bad = SgdConfig { milestones: vec![5, 5], ..cfg(0.1, 0.9, 0.0) };
        assert!(bad.validate().is_err());
    }
}
