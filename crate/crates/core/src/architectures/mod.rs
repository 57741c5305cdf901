//! WRN-d-m classifiers and the residual MLP discriminator.
//!
//! A WRN-d-m has `n = (d - 4) / 6` residual blocks in each of three groups:
//!
//! | group  | output size | channels |
//! |--------|-------------|----------|
//! | group1 | 32 x 32     | 16m      |
//! | group2 | 16 x 16     | 32m      |
//! | group3 | 8 x 8       | 64m      |
//!
//! preceded by a 3x3 convolution with 16 filters and followed by BN, ReLU,
//! global average pooling and a fully-connected layer producing logits.

mod checkpoint;
mod stub;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, Model, ModelSpec};
pub use stub::{StubKind, StubModel};

use crate::autodiff::{Graph, Param, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, BlockKind, Conv2d, Linear, Mode, Module, ResidualBlock, ResidualBlockSpec, Rng};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_DROPOUT: f64 = 0.3;

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

/// WRN-`depth`-`widen` for `num_classes` classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub depth: usize,
    pub widen: usize,
    pub num_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl NetworkSpec {
    pub fn new(depth: usize, widen: usize, num_classes: usize) -> Self {
        Self {
            depth,
            widen,
            num_classes,
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// Residual blocks per group, `n` in `depth = 6n + 4`.
    pub fn blocks_per_group(&self) -> Result<usize> {
        if self.depth < 10 || (self.depth - 4) % 6 != 0 {
            return Err(Error::InvalidSpec(format!(
                "WRN depth {} must satisfy depth = 6n + 4 with n >= 1",
                self.depth
            )));
        }
        if self.widen == 0 {
            return Err(Error::InvalidSpec("widen factor must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be positive".into()));
        }
        crate::layers::check_dropout_rate(self.dropout)?;
        Ok((self.depth - 4) / 6)
    }

    pub fn group_channels(&self) -> [usize; 3] {
        [16 * self.widen, 32 * self.widen, 64 * self.widen]
    }

    pub fn name(&self) -> String {
        format!("WRN-{}-{}", self.depth, self.widen)
    }
}

/// Wide residual network producing `(B, C)` logits from `(B, 3, H, W)` images.
#[derive(Clone, Debug)]
pub struct Wrn<F> {
    pub spec: NetworkSpec,
    stem: Conv2d<F>,
    blocks: Vec<ResidualBlock<F>>,
    bn: BatchNorm<F>,
    fc: Linear<F>,
}

impl<F: Element> Wrn<F> {
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let n = spec.blocks_per_group()?;
        let stem = Conv2d::new("stem", 3, 16, 3, 1, 1, rng);
        let mut blocks = Vec::with_capacity(3 * n);
        let mut in_ch = 16;
        for (gi, &ch) in spec.group_channels().iter().enumerate() {
            for bi in 0..n {
                let stride = if gi > 0 && bi == 0 { 2 } else { 1 };
                let block_spec = ResidualBlockSpec {
                    kind: BlockKind::Conv,
                    in_channels: in_ch,
                    out_channels: ch,
                    stride,
                    dropout_rate: spec.dropout,
                };
                blocks.push(ResidualBlock::new(&format!("group{}.block{bi}", gi + 1), block_spec, rng)?);
                in_ch = ch;
            }
        }
        Ok(Self {
            spec,
            stem,
            blocks,
            bn: BatchNorm::new("final_bn", in_ch),
            fc: Linear::new("fc", in_ch, spec.num_classes, rng),
        })
    }

    pub fn forward<'g>(
        &mut self,
        g: &'g Graph<F>,
        x: Var<'g, F>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var<'g, F>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 3 {
            return Err(Error::InvalidShape {
                shape: xs,
                reason: "WRN expects (B, 3, H, W) images".into(),
            });
        }
        let mut h = self.stem.forward(g, x, mode)?;
        for block in &mut self.blocks {
            h = block.forward(g, h, mode, rng)?;
        }
        let h = self.bn.forward(g, h, mode)?.relu()?;
        let s = h.shape();
        if s[2] != s[3] {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "global pooling expects square feature maps".into(),
            });
        }
        let pooled = h.avg_pool2d(s[2], s[2])?.reshape(&[s[0], s[1]])?;
        self.fc.forward(g, pooled, mode)
    }

    /// Eval-mode logits for a batch of images, outside any training graph.
    pub fn logits(&mut self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let g = Graph::new();
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        let x = g.constant(images.clone())?;
        let y = self.forward(&g, x, Mode::Eval, &mut rng)?;
        Ok((*y.value()).clone())
    }
}

impl<F: Element> Module<F> for Wrn<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.stem.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.bn.visit_params(f);
        self.fc.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.stem.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.bn.visit_params_mut(f);
        self.fc.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        for b in &self.blocks {
            b.visit_buffers(f);
        }
        self.bn.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        for b in &mut self.blocks {
            b.visit_buffers_mut(f);
        }
        self.bn.visit_buffers_mut(f);
    }
}

/// Residual MLP discriminator over `C`-dimensional logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// Number of residual MLP blocks.
    pub depth: usize,
    /// Logit dimension; also the width of every hidden layer.
    pub num_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl DiscriminatorSpec {
    pub fn new(depth: usize, num_classes: usize) -> Self {
        Self {
            depth,
            num_classes,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidSpec("discriminator depth must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be positive".into()));
        }
        crate::layers::check_dropout_rate(self.dropout)
    }

    /// `C` label scores followed by Real and Fake scores.
    pub fn head_dim(&self) -> usize {
        self.num_classes + 2
    }
}

/// Column of the real/fake pair holding the Real score.
pub const REAL: usize = 0;
/// Column of the real/fake pair holding the Fake score.
pub const FAKE: usize = 1;

/// `BN(logits) -> depth x residual MLP block -> linear(C, C + 2)`.
///
/// Label and real/fake outputs share the trunk and split only at the head.
#[derive(Clone, Debug)]
pub struct Discriminator<F> {
    pub spec: DiscriminatorSpec,
    bn_in: BatchNorm<F>,
    blocks: Vec<ResidualBlock<F>>,
    head: Linear<F>,
}

impl<F: Element> Discriminator<F> {
    pub fn new(spec: DiscriminatorSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let c = spec.num_classes;
        let blocks = (0..spec.depth)
            .map(|i| {
                let bs = ResidualBlockSpec {
                    kind: BlockKind::Mlp,
                    in_channels: c,
                    out_channels: c,
                    stride: 1,
                    dropout_rate: spec.dropout,
                };
                ResidualBlock::new(&format!("block{i}"), bs, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            bn_in: BatchNorm::new("input_bn", c),
            blocks,
            head: Linear::new("head", c, spec.head_dim(), rng),
        })
    }

    /// `(B, C)` logits to `(B, C + 2)` scores.
    pub fn forward<'g>(
        &mut self,
        g: &'g Graph<F>,
        logits: Var<'g, F>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var<'g, F>> {
        let s = logits.shape();
        if s.len() != 2 || s[1] != self.spec.num_classes {
            return Err(Error::ShapeMismatch {
                op: "discriminator",
                lhs: s,
                rhs: vec![self.spec.num_classes],
            });
        }
        let mut h = self.bn_in.forward(g, logits, mode)?;
        for b in &mut self.blocks {
            h = b.forward(g, h, mode, rng)?;
        }
        self.head.forward(g, h, mode)
    }

    /// Splits head output into `(label scores (B,C), real/fake scores (B,2))`.
    pub fn split_scores<'g>(&self, scores: Var<'g, F>) -> Result<(Var<'g, F>, Var<'g, F>)> {
        let c = self.spec.num_classes;
        Ok((scores.slice(1, 0, c)?, scores.slice(1, c, c + 2)?))
    }
}

impl<F: Element> Module<F> for Discriminator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.bn_in.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.bn_in.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.bn_in.visit_buffers(f);
        for b in &self.blocks {
            b.visit_buffers(f);
        }
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.bn_in.visit_buffers_mut(f);
        for b in &mut self.blocks {
            b.visit_buffers_mut(f);
        }
    }
}

/// Maps a batch of images to `(B, C)` eval-mode logits. Stubs use the
/// labels and dataset indices instead of the pixels.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict(&mut self, images: &Tensor<f32>, labels: &[usize], indices: &[usize]) -> Result<Tensor<f32>>;
}

impl Predictor for Wrn<f32> {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
    fn predict(&mut self, images: &Tensor<f32>, _: &[usize], _: &[usize]) -> Result<Tensor<f32>> {
        self.logits(images)
    }
}

impl Predictor for StubModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn predict(&mut self, _: &Tensor<f32>, labels: &[usize], indices: &[usize]) -> Result<Tensor<f32>> {
        if let Some(&label) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        Ok(self.logits(labels, indices))
    }
}

impl Predictor for Model {
    fn num_classes(&self) -> usize {
        self.spec().num_classes()
    }
    fn predict(&mut self, images: &Tensor<f32>, labels: &[usize], indices: &[usize]) -> Result<Tensor<f32>> {
        match self {
            Model::Wrn(n) => n.predict(images, labels, indices),
            Model::Stub(s) => s.predict(images, labels, indices),
            Model::Discriminator(_) => Err(Error::InvalidArgument(
                "a discriminator checkpoint does not classify images".into(),
            )),
        }
    }
}

/// Trainable scalars of any module; BN running statistics excluded.
pub fn count_parameters<F: Element>(m: &impl Module<F>) -> usize {
    crate::layers::count_parameters(m)
}
