//! Losses for supervised training, distillation and the adversarial game.
//!
//! Every loss is a scalar graph node averaged over the minibatch. The
//! discriminator-side log-likelihoods (`adversarial_loss`,
//! `discriminator_supervised_loss`) are reported as log-probabilities, so
//! they are non-positive and the discriminator *maximizes* them.

use serde::{Deserialize, Serialize};

use crate::architectures::{FAKE, REAL};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Softmax temperature, strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// A probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget<F>(Vec<F>);

impl<F: Element> SoftTarget<F> {
    pub fn probs(&self) -> &[F] {
        &self.0
    }
}

/// `q_j = exp(t_j / T) / sum_k exp(t_k / T)`, evaluated after subtracting
/// the maximum logit.
pub fn generalized_softmax<F: Element>(logits: &[F], temperature: Temperature) -> SoftTarget<F> {
    let inv_t = F::from_f64_lossy(1.0 / temperature.get());
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<F> = logits.iter().map(|&v| ((v - max) * inv_t).exp()).collect();
    let total = exps.iter().fold(F::zero(), |a, &b| a + b);
    SoftTarget(exps.into_iter().map(|e| e / total).collect())
}

/// Row-wise `log softmax(x / T)` of a `(B, C)` node.
pub fn log_softmax<'g, F: Element>(x: Var<'g, F>, temperature: Temperature) -> Result<Var<'g, F>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape,
            reason: "log_softmax expects (batch, classes)".into(),
        });
    }
    let z = if temperature.get() == 1.0 {
        x
    } else {
        x.scale(1.0 / temperature.get())?
    };
    // The shift cancels in the gradient, so it can be a constant.
    let shift = x.graph().detach(z.max_axis(1, true)?);
    let centered = z.sub(shift)?;
    let lse = centered.exp()?.sum_axis(1, true)?.log()?;
    centered.sub(lse)
}

fn check_same<F: Element>(op: &'static str, a: &Var<'_, F>, b: &Var<'_, F>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
    }
    Ok(())
}

/// One-hot `(B, C)` constant; rejects labels outside `[0, C)`.
fn one_hot<'g, F: Element>(like: &Var<'g, F>, labels: &[usize]) -> Result<Var<'g, F>> {
    let shape = like.shape();
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let mut data = vec![F::zero(); b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        data[i * c + l] = F::one();
    }
    like.graph().constant(Tensor::new(&[b, c], data)?)
}

/// Mean over rows of `log p(label)` under softmax of `scores`.
fn mean_label_log_likelihood<'g, F: Element>(labels: &[usize], scores: Var<'g, F>) -> Result<Var<'g, F>> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape,
            reason: "scores must be (batch, classes)".into(),
        });
    }
    let mask = one_hot(&scores, labels)?;
    let logp = log_softmax(scores, Temperature(1.0))?;
    logp.mul(mask)?.sum_all()?.scale(1.0 / shape[0] as f64)
}

/// Mean over rows of `log p(column)` under softmax of `scores`.
fn mean_column_log_likelihood<'g, F: Element>(scores: Var<'g, F>, column: usize) -> Result<Var<'g, F>> {
    let b = scores.shape()[0];
    log_softmax(scores, Temperature(1.0))?
        .slice(1, column, column + 1)?
        .sum_all()?
        .scale(1.0 / b as f64)
}

/// Mean over the batch of `KL(softmax(t/T) || softmax(s/T))`.
pub fn kd_loss<'g, F: Element>(
    teacher: Var<'g, F>,
    student: Var<'g, F>,
    temperature: Temperature,
) -> Result<Var<'g, F>> {
    check_same("kd_loss", &teacher, &student)?;
    let b = teacher.shape()[0];
    let log_p = log_softmax(teacher, temperature)?;
    let log_q = log_softmax(student, temperature)?;
    let p = log_p.exp()?;
    p.mul(log_p.sub(log_q)?)?.sum_all()?.scale(1.0 / b as f64)
}

/// Mean cross-entropy of the labels under `softmax(student)`.
pub fn supervised_loss<'g, F: Element>(labels: &[usize], student: Var<'g, F>) -> Result<Var<'g, F>> {
    mean_label_log_likelihood(labels, student)?.neg()
}

/// `0.5 * supervised + T^2 * kd`.
pub fn kd_combined_loss<'g, F: Element>(
    labels: &[usize],
    teacher: Var<'g, F>,
    student: Var<'g, F>,
    temperature: Temperature,
) -> Result<Var<'g, F>> {
    let ls = supervised_loss(labels, student)?;
    let kd = kd_loss(teacher, student, temperature)?;
    let t = temperature.get();
    ls.scale(0.5)?.add(kd.scale(t * t)?)
}

fn check_pairs<F: Element>(real: &Var<'_, F>, fake: &Var<'_, F>) -> Result<()> {
    check_same("adversarial_loss", real, fake)?;
    if real.shape()[1] != 2 {
        return Err(Error::ShapeMismatch {
            op: "adversarial_loss",
            lhs: real.shape(),
            rhs: vec![real.shape()[0], 2],
        });
    }
    Ok(())
}

/// Mean of `log P(Real | D(t)) + log P(Fake | D(F(x)))` over the batch,
/// from `(B, 2)` real/fake score pairs on teacher and student logits.
pub fn adversarial_loss<'g, F: Element>(
    real_scores: Var<'g, F>,
    fake_scores: Var<'g, F>,
) -> Result<Var<'g, F>> {
    check_pairs(&real_scores, &fake_scores)?;
    mean_column_log_likelihood(real_scores, REAL)?.add(mean_column_log_likelihood(fake_scores, FAKE)?)
}

/// How the student term of the adversarial loss is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// The student minimizes `log P(Fake | D(F(x)))` exactly as in the
    /// discriminator's objective.
    #[default]
    Saturating,
    /// The student minimizes `-log P(Real | D(F(x)))` instead.
    NonSaturating,
}

/// The adversarial term as seen by the student.
pub fn student_adversarial_loss<'g, F: Element>(
    real_scores: Var<'g, F>,
    fake_scores: Var<'g, F>,
    form: AdversarialForm,
) -> Result<Var<'g, F>> {
    match form {
        AdversarialForm::Saturating => adversarial_loss(real_scores, fake_scores),
        AdversarialForm::NonSaturating => {
            check_pairs(&real_scores, &fake_scores)?;
            mean_column_log_likelihood(real_scores, REAL)?
                .sub(mean_column_log_likelihood(fake_scores, REAL)?)
        }
    }
}

/// Mean of `log P(l | D(t)) + log P(l | D(F(x)))` from the discriminator's
/// `(B, C)` label scores.
pub fn discriminator_supervised_loss<'g, F: Element>(
    labels: &[usize],
    label_scores_real: Var<'g, F>,
    label_scores_fake: Var<'g, F>,
) -> Result<Var<'g, F>> {
    check_same("discriminator_supervised_loss", &label_scores_real, &label_scores_fake)?;
    mean_label_log_likelihood(labels, label_scores_real)?
        .add(mean_label_log_likelihood(labels, label_scores_fake)?)
}

/// `0.5 * (L_A + L_DS)`, maximized by the discriminator.
pub fn discriminator_objective<'g, F: Element>(
    adversarial: Var<'g, F>,
    disc_supervised: Var<'g, F>,
) -> Result<Var<'g, F>> {
    adversarial.add(disc_supervised)?.scale(0.5)
}

/// Mean over rows of `||student - teacher||_1`.
pub fn l1_alignment_loss<'g, F: Element>(teacher: Var<'g, F>, student: Var<'g, F>) -> Result<Var<'g, F>> {
    check_same("l1_alignment_loss", &teacher, &student)?;
    let b = teacher.shape()[0];
    student.sub(teacher)?.abs()?.sum_all()?.scale(1.0 / b as f64)
}

/// `0.5 * (L_A - L_DS)`: the sign of the label term is flipped so the
/// student also keeps the discriminator's label head satisfied.
pub fn gan_loss<'g, F: Element>(adversarial: Var<'g, F>, disc_supervised: Var<'g, F>) -> Result<Var<'g, F>> {
    adversarial.sub(disc_supervised)?.scale(0.5)
}

/// `L_S + L_L1 + 0.5 * (L_A - L_DS)`, minimized by the student.
pub fn student_objective<'g, F: Element>(
    supervised: Var<'g, F>,
    l1: Var<'g, F>,
    adversarial: Var<'g, F>,
    disc_supervised: Var<'g, F>,
) -> Result<Var<'g, F>> {
    supervised.add(l1)?.add(gan_loss(adversarial, disc_supervised)?)
}

/// Which transfer terms enter the student objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossComposition {
    pub supervised: bool,
    pub l1: bool,
    pub gan: bool,
}

impl Default for LossComposition {
    fn default() -> Self {
        Self::FULL
    }
}

impl LossComposition {
    pub const SUPERVISED: Self = Self::new(true, false, false);
    pub const GAN: Self = Self::new(false, false, true);
    pub const SUPERVISED_GAN: Self = Self::new(true, false, true);
    pub const SUPERVISED_L1: Self = Self::new(true, true, false);
    pub const FULL: Self = Self::new(true, true, true);

    /// The five compositions of the loss ablation grid, in table order.
    pub const ABLATION_GRID: [Self; 5] = [
        Self::SUPERVISED,
        Self::GAN,
        Self::SUPERVISED_GAN,
        Self::SUPERVISED_L1,
        Self::FULL,
    ];

    pub const fn new(supervised: bool, l1: bool, gan: bool) -> Self {
        Self { supervised, l1, gan }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.supervised || self.l1 || self.gan) {
            return Err(Error::Config("at least one student loss term must be enabled".into()));
        }
        Ok(())
    }

    /// Row label in the ablation table, e.g. `L_S+L_L1+L_GAN`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.supervised {
            parts.push("L_S");
        }
        if self.l1 {
            parts.push("L_L1");
        }
        if self.gan {
            parts.push("L_GAN");
        }
        parts.join("+")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut c = Self::new(false, false, false);
        for part in s.split('+').map(str::trim) {
            match part {
                "L_S" => c.supervised = true,
                "L_L1" => c.l1 = true,
                "L_GAN" => c.gan = true,
                other => return Err(Error::Config(format!("unknown loss term {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Sums the enabled student terms in the order `L_S, L_L1, L_GAN`.
///
/// With every term present this equals [`student_objective`].
pub fn compose_student_loss<'g, F: Element>(
    supervised: Option<Var<'g, F>>,
    l1: Option<Var<'g, F>>,
    gan: Option<Var<'g, F>>,
) -> Result<Var<'g, F>> {
    let mut total: Option<Var<'g, F>> = None;
    for term in [supervised, l1, gan].into_iter().flatten() {
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    total.ok_or_else(|| Error::Config("student objective has no terms".into()))
}

/// Named scalar values of the loss terms active in one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub supervised: Option<f64>,
    pub kd: Option<f64>,
    pub kd_combined: Option<f64>,
    pub adversarial: Option<f64>,
    pub disc_supervised: Option<f64>,
    pub l1: Option<f64>,
    pub gan: Option<f64>,
    pub student: Option<f64>,
    pub discriminator: Option<f64>,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 9] = [
        "L_S",
        "L_KD",
        "L_KD_combined",
        "L_A",
        "L_DS",
        "L_L1",
        "L_GAN",
        "L_Student",
        "L_Discriminator",
    ];

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.supervised,
            self.kd,
            self.kd_combined,
            self.adversarial,
            self.disc_supervised,
            self.l1,
            self.gan,
            self.student,
            self.discriminator,
        ]
    }

    fn values_mut(&mut self) -> [&mut Option<f64>; 9] {
        [
            &mut self.supervised,
            &mut self.kd,
            &mut self.kd_combined,
            &mut self.adversarial,
            &mut self.disc_supervised,
            &mut self.l1,
            &mut self.gan,
            &mut self.student,
            &mut self.discriminator,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().flatten().all(|v| v.is_finite())
    }

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    /// Values in column order; absent terms are empty fields.
    pub fn csv_fields(&self) -> String {
        self.values()
            .iter()
            .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// One per-step CSV row: `step,` followed by [`Self::csv_fields`].
    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{}", self.csv_fields())
    }
}

/// Running weighted mean of loss reports.
#[derive(Clone, Debug, Default)]
pub struct LossMeter {
    sums: [f64; 9],
    present: [bool; 9],
    weight: f64,
}

impl LossMeter {
    pub fn add(&mut self, report: &LossReport, weight: f64) {
        for (i, v) in report.values().iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v * weight;
                self.present[i] = true;
            }
        }
        self.weight += weight;
    }

    pub fn mean(&self) -> LossReport {
        let mut out = LossReport::default();
        for (i, slot) in out.values_mut().into_iter().enumerate() {
            if self.present[i] && self.weight > 0.0 {
                *slot = Some(self.sums[i] / self.weight);
            }
        }
        out
    }
}
