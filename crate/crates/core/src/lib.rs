//! Knowledge distillation from a wide residual network teacher into a thin
//! student through a learned adversarial loss.
//!
//! Modules, bottom up:
//! - [`tensor`] and [`autodiff`]: dense tensors and a define-by-run
//!   reverse-mode differentiation tape.
//! - [`layers`]: convolution, linear, batch norm, dropout and residual blocks.
//! - [`architectures`]: WRN-d-m classifiers and the residual MLP discriminator.
//! - [`losses`]: supervised, distillation, adversarial and alignment losses.
//! - [`optim`]: SGD with momentum, weight decay and step schedules.
//! - [`data`]: CIFAR binaries, augmentation, synthetic sets, teacher logits.
//! - [`engine`]: baseline, distillation and adversarial training loops.

pub mod architectures;
pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
