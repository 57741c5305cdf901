use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::architectures::{DiscriminatorSpec, NetworkSpec, DEFAULT_DROPOUT};
use crate::data::{make_synthetic_modes, AugmentConfig, CifarVariant, Dataset};
use crate::error::{Error, Result};
use crate::losses::{AdversarialForm, LossComposition, Temperature};
use crate::optim::SgdConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Labels only.
    Baseline,
    /// Weighted supervised and soft-target loss against stored teacher logits.
    Kd,
    /// Alternating discriminator and student updates.
    Gan,
}

impl TrainMode {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, TrainMode::Baseline)
    }

    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Kd => "kd",
            TrainMode::Gan => "gan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory of the CIFAR binary distribution.
    pub path: Option<PathBuf>,
    /// Class count of a synthetic set; fixed by the variant for CIFAR.
    pub num_classes: usize,
    /// Leading training images kept; 0 keeps all.
    pub train_size: usize,
    /// Leading test images kept; 0 keeps all.
    pub test_size: usize,
    /// Class overlap of a synthetic set, in `[0, 1]`.
    pub difficulty: f64,
    /// Prototype patterns per synthetic class.
    pub modes: usize,
    /// Generator seed of a synthetic set, independent of the run seed.
    pub data_seed: u64,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            num_classes: 10,
            train_size: 5000,
            test_size: 1000,
            difficulty: 0.5,
            modes: 1,
            data_seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        match self.source {
            DataSource::Synthetic => self.num_classes,
            DataSource::Cifar10 => 10,
            DataSource::Cifar100 => 100,
        }
    }

    fn validate(&self) -> Result<()> {
        self.augment
            .validate()
            .map_err(|e| Error::Config(format!("data.augment: {e}")))?;
        match self.source {
            DataSource::Synthetic => {
                if self.num_classes == 0 {
                    return Err(Error::Config("data.num_classes: must be positive".into()));
                }
                if self.train_size == 0 || self.test_size == 0 {
                    return Err(Error::Config(
                        "data.train_size / data.test_size: synthetic sets need explicit sizes".into(),
                    ));
                }
                if self.modes == 0 {
                    return Err(Error::Config("data.modes: must be positive".into()));
                }
                if !(0.0..=1.0).contains(&self.difficulty) {
                    return Err(Error::Config(format!(
                        "data.difficulty: must lie in [0, 1], got {}",
                        self.difficulty
                    )));
                }
            }
            DataSource::Cifar10 | DataSource::Cifar100 => {
                if self.path.is_none() {
                    return Err(Error::Config("data.path: required for CIFAR sources".into()));
                }
            }
        }
        Ok(())
    }

    /// `(train, test)` with the test split normalized by training statistics.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        match self.source {
            DataSource::Synthetic => {
                let all = make_synthetic_modes(
                    self.train_size + self.test_size,
                    self.num_classes,
                    self.modes,
                    self.difficulty,
                    self.data_seed,
                )?;
                all.split_at(self.train_size)
            }
            DataSource::Cifar10 | DataSource::Cifar100 => {
                let variant = if self.source == DataSource::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                let dir = self.path.as_ref().expect("validated");
                let (train, test) = crate::data::load_cifar_splits(dir, variant)?;
                let train = truncate(train, self.train_size)?;
                let test = truncate(test, self.test_size)?.with_normalization(train.normalization());
                Ok((train, test))
            }
        }
    }
}

fn truncate(ds: Dataset, n: usize) -> Result<Dataset> {
    if n == 0 || n >= ds.len() {
        return Ok(ds);
    }
    ds.subset(&(0..n).collect::<Vec<_>>())
}

/// Depth, width and dropout of a WRN; the class count comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrnConfig {
    pub depth: usize,
    pub widen: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

impl WrnConfig {
    pub fn spec(&self, num_classes: usize) -> NetworkSpec {
        NetworkSpec {
            depth: self.depth,
            widen: self.widen,
            num_classes,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub depth: usize,
    pub widen: usize,
    pub dropout: f64,
    /// Checkpoint written by teacher training and read by logits export.
    pub checkpoint: Option<PathBuf>,
    /// Logits store read by the kd and gan modes.
    pub logits: Option<PathBuf>,
    /// Recompute teacher logits per batch with dropout active instead of
    /// reading the store. Needs `checkpoint`.
    pub on_the_fly_dropout: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            depth: 16,
            widen: 4,
            dropout: DEFAULT_DROPOUT,
            checkpoint: None,
            logits: None,
            on_the_fly_dropout: false,
        }
    }
}

impl TeacherConfig {
    pub fn spec(&self, num_classes: usize) -> NetworkSpec {
        WrnConfig {
            depth: self.depth,
            widen: self.widen,
            dropout: self.dropout,
        }
        .spec(num_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { temperature: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Residual MLP blocks in the discriminator.
    pub disc_depth: usize,
    pub disc_dropout: f64,
    /// Enabled student terms, e.g. `L_S+L_L1+L_GAN`.
    pub losses: String,
    pub adversarial_form: AdversarialForm,
    /// Discriminator updates per student update.
    pub disc_steps: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            disc_depth: 3,
            disc_dropout: DEFAULT_DROPOUT,
            losses: LossComposition::FULL.label(),
            adversarial_form: AdversarialForm::default(),
            disc_steps: 1,
        }
    }
}

impl GanConfig {
    pub fn composition(&self) -> Result<LossComposition> {
        LossComposition::parse(&self.losses).map_err(|e| Error::Config(format!("gan.losses: {e}")))
    }

    pub fn disc_spec(&self, num_classes: usize) -> DiscriminatorSpec {
        DiscriminatorSpec {
            depth: self.disc_depth,
            num_classes,
            dropout: self.disc_dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub student: SgdConfig,
    pub discriminator: SgdConfig,
}

impl OptimConfig {
    pub fn for_epochs(epochs: usize) -> Self {
        Self {
            student: SgdConfig::student(epochs),
            discriminator: SgdConfig::discriminator(epochs),
        }
    }
}

/// Everything that determines a training run, apart from the output
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    pub student: WrnConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub gan: GanConfig,
    /// Filled from `epochs` when absent.
    #[serde(default)]
    pub optim: Option<OptimConfig>,
}

fn default_batch_size() -> usize {
    128
}

fn default_eval_batch_size() -> usize {
    250
}

impl ExperimentConfig {
    /// Parses, fills the epoch-dependent defaults and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn fill_defaults(&mut self) {
        if self.optim.is_none() {
            self.optim = Some(OptimConfig::for_epochs(self.epochs));
        }
    }

    /// The full configuration, defaults included, as TOML.
    pub fn to_toml(&self) -> Result<String> {
        let mut full = self.clone();
        full.fill_defaults();
        toml::to_string(&full).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn optim(&self) -> OptimConfig {
        self.optim.clone().unwrap_or_else(|| OptimConfig::for_epochs(self.epochs))
    }

    pub fn num_classes(&self) -> usize {
        self.data.classes()
    }

    pub fn student_spec(&self) -> NetworkSpec {
        self.student.spec(self.num_classes())
    }

    pub fn teacher_spec(&self) -> NetworkSpec {
        self.teacher.spec(self.num_classes())
    }

    pub fn disc_spec(&self) -> DiscriminatorSpec {
        self.gan.disc_spec(self.num_classes())
    }

    pub fn temperature(&self) -> Result<Temperature> {
        Temperature::new(self.kd.temperature).map_err(|e| Error::Config(format!("kd.temperature: {e}")))
    }

    /// Field-level checks; messages start with the offending key.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("{name}: {e}"));
        if self.epochs == 0 {
            return Err(Error::Config("epochs: must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size: must be at least 2 for batch statistics".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size: must be positive".into()));
        }
        self.data.validate()?;
        self.student_spec().blocks_per_group().map_err(|e| field("student.depth", e))?;
        crate::layers::check_dropout_rate(self.student.dropout).map_err(|e| field("student.dropout", e))?;
        let optim = self.optim();
        optim.student.validate().map_err(|e| field("optim.student", e))?;
        optim.discriminator.validate().map_err(|e| field("optim.discriminator", e))?;
        match self.mode {
            TrainMode::Baseline => {}
            TrainMode::Kd => {
                self.temperature()?;
            }
            TrainMode::Gan => {
                self.gan.composition()?;
                self.disc_spec().validate().map_err(|e| field("gan.disc_depth", e))?;
                if self.gan.disc_steps == 0 {
                    return Err(Error::Config("gan.disc_steps: must be at least 1".into()));
                }
            }
        }
        if self.mode.needs_teacher() && self.teacher.on_the_fly_dropout && self.teacher.checkpoint.is_none() {
            return Err(Error::Config(
                "teacher.checkpoint: required when teacher.on_the_fly_dropout is set".into(),
            ));
        }
        Ok(())
    }
}
