//! Trainable layers and the two residual block variants.
//!
//! Layers own their [`Param`]s and bind them into a fresh [`Graph`] on every
//! forward call. Batch-norm running statistics are buffers: they are saved in
//! checkpoints but never touched by the optimizer.

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Param, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Random source used for initialization, dropout and augmentation.
pub type Rng = ChaCha8Rng;

/// Independent generator for `(seed, stream, index)`; distinct triples never
/// share a key, so consumers on different streams cannot perturb each other.
pub fn seeded_rng(seed: u64, stream: u64, index: u64) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    <Rng as rand::SeedableRng>::from_seed(key)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a forward pass treats batch norm, dropout and parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout on, running stats updated, params trainable.
    Train,
    /// Like `Train` but params enter the graph as constants and running
    /// stats stay put. Used for the discriminator during the student step.
    Frozen,
    /// Running statistics, dropout off, no randomness consumed.
    Eval,
}

impl Mode {
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Anything that owns parameters and buffers.
pub trait Module<F: Element> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor<F>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<F>)) {}
}

/// Binds `p` as trainable, or as a constant in [`Mode::Frozen`].
pub fn bind<'g, F: Element>(g: &'g Graph<F>, p: &Param<F>, mode: Mode) -> Result<Var<'g, F>> {
    match mode {
        Mode::Frozen => g.constant(p.value.clone()),
        _ => g.param(p),
    }
}

pub fn zero_grads<F: Element>(m: &mut impl Module<F>) {
    m.visit_params_mut(&mut |p| p.zero_grad());
}

/// Pulls every bound parameter's gradient out of `g`.
pub fn accumulate_grads<F: Element>(m: &mut impl Module<F>, g: &Graph<F>) -> Result<()> {
    let mut res = Ok(());
    m.visit_params_mut(&mut |p| {
        if res.is_ok() {
            res = p.accumulate_from(g);
        }
    });
    res
}

/// Trainable scalar count; buffers excluded.
pub fn count_parameters<F: Element>(m: &impl Module<F>) -> usize {
    let mut n = 0;
    m.visit_params(&mut |p| n += p.value.numel());
    n
}

/// Gaussian with variance `2 / fan_in`.
fn he_normal<F: Element>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<F> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| F::from_f64_lossy(normal.sample(rng)))
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Bias-free 2-D convolution with square kernels.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Element> Conv2d<F> {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        Self {
            weight: Param::new(join(prefix, "weight"), he_normal(&shape, in_channels * kernel * kernel, rng)),
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<F>, x: Var<'g, F>, mode: Mode) -> Result<Var<'g, F>> {
        x.conv2d(bind(g, &self.weight, mode)?, self.stride, self.pad)
    }
}

impl<F: Element> Module<F> for Conv2d<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.weight);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
    }
}

/// Fully-connected layer `x W + b` with `W` of shape `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Element> Linear<F> {
    pub fn new(prefix: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::new(join(prefix, "weight"), he_normal(&[inputs, outputs], inputs, rng)),
            bias: Param::new(join(prefix, "bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<F>, x: Var<'g, F>, mode: Mode) -> Result<Var<'g, F>> {
        x.matmul(bind(g, &self.weight, mode)?)?
            .add(bind(g, &self.bias, mode)?)
    }
}

impl<F: Element> Module<F> for Linear<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Batch normalization over axis 1 of `(N, C)` or `(N, C, H, W)` input.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    prefix: String,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub eps: f64,
    pub momentum: f64,
}

impl<F: Element> BatchNorm<F> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            gamma: Param::new(join(prefix, "gamma"), Tensor::ones(&[channels])),
            beta: Param::new(join(prefix, "beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<'g>(&mut self, g: &'g Graph<F>, x: Var<'g, F>, mode: Mode) -> Result<Var<'g, F>> {
        let gamma = bind(g, &self.gamma, mode)?;
        let beta = bind(g, &self.beta, mode)?;
        match mode {
            Mode::Eval => x.batch_norm_eval(
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            ),
            Mode::Frozen => Ok(x.batch_norm_train(gamma, beta, self.eps)?.0),
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, self.eps)?;
                let m = self.momentum;
                let unbias = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
                for c in 0..stats.mean.len() {
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = F::from_f64_lossy((1.0 - m) * rm.to_f64_lossy() + m * stats.mean[c].to_f64_lossy());
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = F::from_f64_lossy(
                        (1.0 - m) * rv.to_f64_lossy() + m * stats.var[c].to_f64_lossy() * unbias,
                    );
                }
                Ok(y)
            }
        }
    }
}

impl<F: Element> Module<F> for BatchNorm<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&join(&self.prefix, "running_mean"), &self.running_mean);
        f(&join(&self.prefix, "running_var"), &self.running_var);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&join(&self.prefix, "running_mean"), &mut self.running_mean);
        f(&join(&self.prefix, "running_var"), &mut self.running_var);
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so eval mode
/// is the identity.
pub fn dropout<'g, F: Element>(
    g: &'g Graph<F>,
    x: Var<'g, F>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var<'g, F>> {
    check_dropout_rate(rate)?;
    if !mode.is_stochastic() || rate == 0.0 {
        return Ok(x);
    }
    let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(&x.shape(), |_| {
        if rng.gen::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    });
    x.mul(g.constant(mask)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Conv,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualBlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dropout_rate: f64,
}

impl ResidualBlockSpec {
    pub fn validate(&self) -> Result<()> {
        check_dropout_rate(self.dropout_rate)?;
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!("degenerate residual block {self:?}")));
        }
        if self.kind == BlockKind::Mlp && (self.in_channels != self.out_channels || self.stride != 1) {
            return Err(Error::InvalidArgument(
                "mlp residual block needs equal widths and stride 1".into(),
            ));
        }
        Ok(())
    }

    fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Clone, Debug)]
enum Weight<F> {
    Conv(Conv2d<F>),
    Linear(Linear<F>),
}

impl<F: Element> Weight<F> {
    fn forward<'g>(&self, g: &'g Graph<F>, x: Var<'g, F>, mode: Mode) -> Result<Var<'g, F>> {
        match self {
            Weight::Conv(c) => c.forward(g, x, mode),
            Weight::Linear(l) => l.forward(g, x, mode),
        }
    }

    fn module(&self) -> &dyn ModuleDyn<F> {
        match self {
            Weight::Conv(c) => c,
            Weight::Linear(l) => l,
        }
    }

    fn module_mut(&mut self) -> &mut dyn ModuleDyn<F> {
        match self {
            Weight::Conv(c) => c,
            Weight::Linear(l) => l,
        }
    }
}

// Object-safe view of Module used inside containers.
trait ModuleDyn<F: Element> {
    fn params(&self, f: &mut dyn FnMut(&Param<F>));
    fn params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));
}

impl<F: Element, M: Module<F>> ModuleDyn<F> for M {
    fn params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.visit_params(f)
    }
    fn params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.visit_params_mut(f)
    }
}

/// Pre-activation residual block:
/// `shortcut(x) + W2(ReLU(BN2(dropout(W1(ReLU(BN1(x)))))))`.
///
/// The shortcut is the identity unless the block changes stride or width,
/// in which case it is a strided 1x1 convolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock<F> {
    pub spec: ResidualBlockSpec,
    pub bn1: BatchNorm<F>,
    w1: Weight<F>,
    pub bn2: BatchNorm<F>,
    w2: Weight<F>,
    pub shortcut: Option<Conv2d<F>>,
}

impl<F: Element> ResidualBlock<F> {
    pub fn new(prefix: &str, spec: ResidualBlockSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let (w1, w2, shortcut) = match spec.kind {
            BlockKind::Conv => (
                Weight::Conv(Conv2d::new(&join(prefix, "conv1"), cin, cout, 3, spec.stride, 1, rng)),
                Weight::Conv(Conv2d::new(&join(prefix, "conv2"), cout, cout, 3, 1, 1, rng)),
                spec.needs_projection()
                    .then(|| Conv2d::new(&join(prefix, "shortcut"), cin, cout, 1, spec.stride, 0, rng)),
            ),
            BlockKind::Mlp => (
                Weight::Linear(Linear::new(&join(prefix, "fc1"), cin, cout, rng)),
                Weight::Linear(Linear::new(&join(prefix, "fc2"), cout, cout, rng)),
                None,
            ),
        };
        Ok(Self {
            spec,
            bn1: BatchNorm::new(&join(prefix, "bn1"), cin),
            w1,
            bn2: BatchNorm::new(&join(prefix, "bn2"), cout),
            w2,
            shortcut,
        })
    }

    pub fn forward<'g>(
        &mut self,
        g: &'g Graph<F>,
        x: Var<'g, F>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var<'g, F>> {
        let channels = x.shape().get(1).copied().unwrap_or(0);
        if channels != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "residual_block",
                lhs: x.shape(),
                rhs: vec![self.spec.in_channels],
            });
        }
        let h = self.bn1.forward(g, x, mode)?.relu()?;
        let h = self.w1.forward(g, h, mode)?;
        let h = dropout(g, h, self.spec.dropout_rate, mode, rng)?;
        let h = self.bn2.forward(g, h, mode)?.relu()?;
        let h = self.w2.forward(g, h, mode)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(g, x, mode)?,
            None => x,
        };
        let (ss, hs) = (skip.shape(), h.shape());
        assert_eq!(ss, hs, "residual branch and shortcut disagree: construction bug");
        skip.add(h)
    }

    /// Sets every weight of the residual branch's final layer to zero.
    pub fn zero_last_weight(&mut self) {
        self.w2.module_mut().params_mut(&mut |p| p.value.fill(F::zero()));
    }
}

impl<F: Element> Module<F> for ResidualBlock<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.bn1.visit_params(f);
        self.w1.module().params(f);
        self.bn2.visit_params(f);
        self.w2.module().params(f);
        if let Some(s) = &self.shortcut {
            s.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.bn1.visit_params_mut(f);
        self.w1.module_mut().params_mut(f);
        self.bn2.visit_params_mut(f);
        self.w2.module_mut().params_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params_mut(f);
        }
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.bn1.visit_buffers_mut(f);
        self.bn2.visit_buffers_mut(f);
    }
}
