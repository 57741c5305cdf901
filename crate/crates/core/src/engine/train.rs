use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{ExperimentConfig, TrainMode};
use super::eval::{argmax, evaluate};
use crate::architectures::{Checkpoint, Discriminator, ModelSpec, Wrn, FAKE, REAL};
use crate::autodiff::{Graph, Var};
use crate::data::{epoch_batches, Batch, Dataset, TeacherLogitsStore};
use crate::error::{Error, Result};
use crate::layers::{accumulate_grads, seeded_rng, zero_grads, Mode, Module, Rng};
use crate::losses::{
    adversarial_loss, compose_student_loss, discriminator_objective, discriminator_supervised_loss, gan_loss,
    kd_combined_loss, kd_loss, l1_alignment_loss, student_adversarial_loss, supervised_loss, LossComposition,
    LossMeter, LossReport, Temperature,
};
use crate::optim::Sgd;
use crate::tensor::Tensor;

// Stream ids for `seeded_rng`. Each consumer owns one, so enabling or
// disabling a component never shifts another component's random draws.
const STUDENT_INIT_STREAM: u64 = 10;
const DISC_INIT_STREAM: u64 = 11;
const AUGMENT_STREAM: u64 = 12;
/// Stream of the student's dropout masks.
pub const STUDENT_DROPOUT_STREAM: u64 = 13;
const DISC_DROPOUT_STREAM: u64 = 14;
const TEACHER_DROPOUT_STREAM: u64 = 15;

/// Summary of one epoch. Everything except `seconds` is a deterministic
/// function of the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossReport,
    /// Percent error on the augmented training batches, in train mode.
    pub train_error: f64,
    pub test_error: f64,
    /// Real/fake accuracy of the discriminator over the epoch's updates.
    pub disc_accuracy: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_header() -> String {
        format!("epoch,lr,{},train_error,test_error,disc_accuracy", LossReport::csv_header())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.losses.csv_fields(),
            self.train_error,
            self.test_error,
            self.disc_accuracy.map(|a| a.to_string()).unwrap_or_default()
        )
    }
}

pub struct TrainingRun {
    pub mode: TrainMode,
    pub records: Vec<EpochRecord>,
    /// Non-fatal problems, such as a collapsed discriminator.
    pub warnings: Vec<String>,
    /// Files written, in order.
    pub artifacts: Vec<PathBuf>,
    pub student: Wrn<f32>,
    pub discriminator: Option<Discriminator<f32>>,
}

impl TrainingRun {
    pub fn final_test_error(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_error)
    }

    pub fn best_test_error(&self) -> f64 {
        self.records.iter().map(|r| r.test_error).fold(f64::INFINITY, f64::min)
    }

    /// Contents of `metrics.csv`.
    pub fn metrics_csv(&self) -> String {
        let mut s = EpochRecord::csv_header();
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Where teacher logits come from in the kd and gan modes.
pub enum TeacherSource<'a> {
    None,
    Store(&'a TeacherLogitsStore),
    /// A teacher network run per batch with dropout and batch statistics.
    OnTheFly(Wrn<f32>),
}

/// Result of one minibatch update.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Training images the student classified correctly before the update.
    pub correct: usize,
    pub disc_accuracy: Option<f64>,
}

/// Networks, optimizers and random streams of one run.
pub struct Trainer {
    mode: TrainMode,
    seed: u64,
    pub student: Wrn<f32>,
    student_opt: Sgd<f32>,
    pub discriminator: Option<Discriminator<f32>>,
    disc_opt: Option<Sgd<f32>>,
    composition: LossComposition,
    temperature: Option<Temperature>,
    form: crate::losses::AdversarialForm,
    disc_steps: usize,
    student_rng: Rng,
    disc_rng: Rng,
    teacher_rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let optim = cfg.optim();
        let student = Wrn::new(cfg.student_spec(), &mut seeded_rng(cfg.seed, STUDENT_INIT_STREAM, 0))?;
        let composition = match cfg.mode {
            TrainMode::Gan => cfg.gan.composition()?,
            _ => LossComposition::SUPERVISED,
        };
        let (discriminator, disc_opt) = if cfg.mode == TrainMode::Gan {
            let d = Discriminator::new(cfg.disc_spec(), &mut seeded_rng(cfg.seed, DISC_INIT_STREAM, 0))?;
            (Some(d), Some(Sgd::new(optim.discriminator.clone())?))
        } else {
            (None, None)
        };
        Ok(Self {
            mode: cfg.mode,
            seed: cfg.seed,
            student,
            student_opt: Sgd::new(optim.student)?,
            discriminator,
            disc_opt,
            composition,
            temperature: (cfg.mode == TrainMode::Kd).then(|| cfg.temperature()).transpose()?,
            form: cfg.gan.adversarial_form,
            disc_steps: cfg.gan.disc_steps,
            student_rng: seeded_rng(cfg.seed, STUDENT_DROPOUT_STREAM, 0),
            disc_rng: seeded_rng(cfg.seed, DISC_DROPOUT_STREAM, 0),
            teacher_rng: seeded_rng(cfg.seed, TEACHER_DROPOUT_STREAM, 0),
            step: 0,
        })
    }

    /// Sets learning rates and reseeds the per-epoch random streams.
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.student_opt.set_epoch(epoch);
        if let Some(o) = &mut self.disc_opt {
            o.set_epoch(epoch);
        }
        let e = epoch as u64;
        self.student_rng = seeded_rng(self.seed, STUDENT_DROPOUT_STREAM, e);
        self.disc_rng = seeded_rng(self.seed, DISC_DROPOUT_STREAM, e);
        self.teacher_rng = seeded_rng(self.seed, TEACHER_DROPOUT_STREAM, e);
    }

    pub fn lr(&self) -> f64 {
        self.student_opt.lr()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Whether the discriminator takes part in training at all. Without
    /// the adversarial term nothing reads it, so it is left untouched.
    pub fn trains_discriminator(&self) -> bool {
        self.mode == TrainMode::Gan && self.composition.gan
    }

    fn fail(&self, source: Error) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            source: Box::new(source),
        }
    }

    /// Teacher rows for a batch.
    pub fn teacher_logits(&mut self, batch: &Batch, source: &mut TeacherSource<'_>) -> Result<Option<Tensor<f32>>> {
        if !self.mode.needs_teacher() {
            return Ok(None);
        }
        match source {
            TeacherSource::None => Err(Error::InvalidArgument(format!(
                "{} mode needs teacher logits",
                self.mode.label()
            ))),
            TeacherSource::Store(s) => s.gather(&batch.indices).map(Some),
            TeacherSource::OnTheFly(t) => {
                let g = Graph::new();
                let x = g.constant(batch.images.clone())?;
                let y = t.forward(&g, x, Mode::Frozen, &mut self.teacher_rng)?;
                Ok(Some((*y.value()).clone()))
            }
        }
    }

    /// One discriminator update on teacher rows (Real) and fixed student
    /// logits (Fake). Returns the objective before the update and the
    /// real/fake accuracy.
    pub fn discriminator_step(
        &mut self,
        labels: &[usize],
        teacher: &Tensor<f32>,
        student: &Tensor<f32>,
    ) -> Result<(f64, f64)> {
        let b = labels.len();
        let disc = self
            .discriminator
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("no discriminator in this run".into()))?;
        let g = Graph::new();
        let both = Var::concat(&[g.constant(teacher.clone())?, g.constant(student.clone())?], 0)?;
        let scores = disc.forward(&g, both, Mode::Train, &mut self.disc_rng)?;
        let (label_scores, rf) = disc.split_scores(scores)?;
        let (rf_real, rf_fake) = (rf.slice(0, 0, b)?, rf.slice(0, b, 2 * b)?);
        let la = adversarial_loss(rf_real, rf_fake)?;
        let lds = discriminator_supervised_loss(labels, label_scores.slice(0, 0, b)?, label_scores.slice(0, b, 2 * b)?)?;
        let objective = discriminator_objective(la, lds)?;
        let value = objective.item() as f64;
        let accuracy = real_fake_accuracy(&rf.value(), b);
        if !value.is_finite() {
            return Err(self.fail(Error::NonFinite("discriminator objective".into())));
        }
        // Maximize by descending on the negation.
        objective.neg()?.backward()?;
        let disc = self.discriminator.as_mut().expect("checked above");
        zero_grads(disc);
        accumulate_grads(disc, &g)?;
        let opt = self.disc_opt.as_mut().expect("present with the discriminator");
        if let Err(e) = opt.step(disc) {
            return Err(self.fail(e));
        }
        Ok((value, accuracy))
    }

    /// Forward, optional discriminator updates, then the student update.
    pub fn train_step(&mut self, batch: &Batch, teacher: Option<&Tensor<f32>>) -> Result<StepOutcome> {
        match self.step_inner(batch, teacher) {
            Err(e @ Error::NonFinite(_)) => Err(self.fail(e)),
            other => other,
        }
    }

    fn step_inner(&mut self, batch: &Batch, teacher: Option<&Tensor<f32>>) -> Result<StepOutcome> {
        let b = batch.len();
        let g = Graph::new();
        let x = g.constant(batch.images.clone())?;
        let s = self.student.forward(&g, x, Mode::Train, &mut self.student_rng)?;
        let s_value = s.value();
        let correct = (0..b).filter(|&i| argmax(s_value.row(i)) == batch.labels[i]).count();
        let mut report = LossReport::default();
        let teacher_var = |t: Option<&Tensor<f32>>| -> Result<Var<'_, f32>> {
            let t = t.ok_or_else(|| Error::InvalidArgument("missing teacher logits".into()))?;
            g.constant(t.clone())
        };

        let mut disc_accuracy = None;
        let total = match self.mode {
            TrainMode::Baseline => {
                let ls = supervised_loss(&batch.labels, s)?;
                report.supervised = Some(ls.item() as f64);
                ls
            }
            TrainMode::Kd => {
                let temp = self.temperature.expect("kd mode has a temperature");
                let t = teacher_var(teacher)?;
                let ls = supervised_loss(&batch.labels, s)?;
                let kd = kd_loss(t, s, temp)?;
                report.supervised = Some(ls.item() as f64);
                report.kd = Some(kd.item() as f64);
                let total = kd_combined_loss(&batch.labels, t, s, temp)?;
                report.kd_combined = Some(total.item() as f64);
                total
            }
            TrainMode::Gan => {
                let t_tensor = teacher.ok_or_else(|| Error::InvalidArgument("missing teacher logits".into()))?;
                if self.trains_discriminator() {
                    let (mut obj, mut acc) = (0.0, 0.0);
                    for _ in 0..self.disc_steps {
                        (obj, acc) = self.discriminator_step(&batch.labels, t_tensor, &s_value)?;
                    }
                    report.discriminator = Some(obj);
                    disc_accuracy = Some(acc);
                }
                let comp = self.composition;
                let t = teacher_var(teacher)?;
                let ls = comp.supervised.then(|| supervised_loss(&batch.labels, s)).transpose()?;
                let l1 = comp.l1.then(|| l1_alignment_loss(t, s)).transpose()?;
                let lgan = if comp.gan {
                    let disc = self.discriminator.as_mut().expect("gan mode has a discriminator");
                    let both = Var::concat(&[t, s], 0)?;
                    let scores = disc.forward(&g, both, Mode::Frozen, &mut self.disc_rng)?;
                    let (label_scores, rf) = disc.split_scores(scores)?;
                    let la = student_adversarial_loss(rf.slice(0, 0, b)?, rf.slice(0, b, 2 * b)?, self.form)?;
                    let lds = discriminator_supervised_loss(
                        &batch.labels,
                        label_scores.slice(0, 0, b)?,
                        label_scores.slice(0, b, 2 * b)?,
                    )?;
                    report.adversarial = Some(la.item() as f64);
                    report.disc_supervised = Some(lds.item() as f64);
                    let lgan = gan_loss(la, lds)?;
                    report.gan = Some(lgan.item() as f64);
                    Some(lgan)
                } else {
                    None
                };
                report.supervised = ls.map(|v| v.item() as f64);
                report.l1 = l1.map(|v| v.item() as f64);
                compose_student_loss(ls, l1, lgan)?
            }
        };
        report.student = Some(total.item() as f64);
        if !report.is_finite() {
            return Err(self.fail(Error::NonFinite(format!("loss report {report:?}"))));
        }
        total.backward()?;
        zero_grads(&mut self.student);
        accumulate_grads(&mut self.student, &g)?;
        if let Err(e) = self.student_opt.step(&mut self.student) {
            return Err(self.fail(e));
        }
        self.step += 1;
        Ok(StepOutcome {
            report,
            correct,
            disc_accuracy,
        })
    }
}

fn real_fake_accuracy(rf: &Tensor<f32>, b: usize) -> f64 {
    let hits = (0..2 * b)
        .filter(|&i| {
            let want = if i < b { REAL } else { FAKE };
            argmax(rf.row(i)) == want
        })
        .count();
    hits as f64 / (2 * b) as f64
}

/// CRC-32 over every parameter value, in visiting order.
pub fn parameter_checksum(m: &impl Module<f32>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    m.visit_params(&mut |p| {
        for v in p.value.data() {
            h.update(&v.to_le_bytes());
        }
    });
    h.finalize()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where artifacts go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Echo per-epoch log lines to stderr.
    pub verbose: bool,
}

struct Outputs {
    dir: PathBuf,
    log: BufWriter<File>,
    losses: BufWriter<File>,
    metrics: BufWriter<File>,
    artifacts: Vec<PathBuf>,
}

impl Outputs {
    fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let config = dir.join("config.toml");
        std::fs::write(&config, cfg.to_toml()?)?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        let mut losses = open("losses.csv")?;
        writeln!(losses, "step,{}", LossReport::csv_header())?;
        let mut metrics = open("metrics.csv")?;
        writeln!(metrics, "{}", EpochRecord::csv_header())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: open("run.log")?,
            losses,
            metrics,
            artifacts: vec![config],
        })
    }
}

fn log_line(out: &mut Option<Outputs>, verbose: bool, line: &str) -> Result<()> {
    if verbose {
        eprintln!("{line}");
    }
    if let Some(o) = out {
        writeln!(o.log, "{line}")?;
        o.log.flush()?;
    }
    Ok(())
}

fn collapse_warning(epoch: usize, accs: &[f64]) -> Option<String> {
    if accs.is_empty() {
        return None;
    }
    if accs.iter().all(|&a| a >= 0.99) {
        Some(format!("epoch {epoch}: discriminator real/fake accuracy stayed at 100% for the whole epoch"))
    } else if accs.iter().all(|&a| (a - 0.5).abs() <= 0.01) {
        Some(format!("epoch {epoch}: discriminator real/fake accuracy stayed at 50% for the whole epoch"))
    } else {
        None
    }
}

/// Trains the student described by `cfg` in `cfg.mode`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    mut teacher: TeacherSource<'_>,
    opts: &RunOptions,
) -> Result<TrainingRun> {
    cfg.validate()?;
    for (name, ds) in [("training", train), ("test", test)] {
        if ds.num_classes() != cfg.num_classes() {
            return Err(Error::Config(format!(
                "{name} set has {} classes, configuration expects {}",
                ds.num_classes(),
                cfg.num_classes()
            )));
        }
    }
    if cfg.mode.needs_teacher() {
        match &teacher {
            TeacherSource::None => {
                return Err(Error::InvalidArgument(format!(
                    "{} mode needs a teacher logits store",
                    cfg.mode.label()
                )))
            }
            TeacherSource::Store(s) => s.check_aligned(train)?,
            TeacherSource::OnTheFly(t) => {
                if t.spec.num_classes != cfg.num_classes() {
                    return Err(Error::Config("teacher class count differs from the data".into()));
                }
            }
        }
    }
    let aug = cfg.data.augment;
    aug.validate()?;

    let mut trainer = Trainer::new(cfg)?;
    let mut out = opts.out_dir.as_deref().map(|d| Outputs::create(d, cfg)).transpose()?;
    let student_spec = ModelSpec::Wrn(cfg.student_spec());
    log_line(
        &mut out,
        opts.verbose,
        &format!(
            "{} run: student {} on {} training / {} test images, {} epochs, seed {}",
            cfg.mode.label(),
            cfg.student_spec().name(),
            train.len(),
            test.len(),
            cfg.epochs,
            cfg.seed
        ),
    )?;

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut warnings = Vec::new();
    let mut timing = String::from("epoch,seconds\n");
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        trainer.begin_epoch(epoch);
        let lr = trainer.lr();
        let mut aug_rng = seeded_rng(cfg.seed, AUGMENT_STREAM, epoch as u64);
        let mut meter = LossMeter::default();
        let (mut correct, mut seen) = (0usize, 0usize);
        let mut accs = Vec::new();
        for idx in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let batch = train.batch(&idx, Some((&aug, &mut aug_rng)))?;
            let t = trainer.teacher_logits(&batch, &mut teacher)?;
            let step = trainer.step_index();
            let outcome = trainer.train_step(&batch, t.as_ref())?;
            meter.add(&outcome.report, batch.len() as f64);
            correct += outcome.correct;
            seen += batch.len();
            accs.extend(outcome.disc_accuracy);
            if let Some(o) = &mut out {
                writeln!(o.losses, "{}", outcome.report.csv_row(step))?;
            }
        }
        let test_error = evaluate(&mut trainer.student, test, cfg.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            losses: meter.mean(),
            train_error: 100.0 * (seen - correct) as f64 / seen as f64,
            test_error,
            disc_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
            seconds: started.elapsed().as_secs_f64(),
        };
        timing.push_str(&format!("{epoch},{}\n", record.seconds));
        if let Some(o) = &mut out {
            writeln!(o.metrics, "{}", record.csv_row())?;
            o.metrics.flush()?;
            o.losses.flush()?;
        }
        if best.as_ref().map_or(true, |(e, _)| test_error < *e) {
            best = Some((test_error, Checkpoint::from_module(student_spec.clone(), &trainer.student)));
        }
        let mut line = format!(
            "epoch {epoch} lr {lr} train_error {:.2} test_error {:.2}",
            record.train_error, record.test_error
        );
        for (name, v) in LossReport::COLUMNS.iter().zip(record.losses.values()) {
            if let Some(v) = v {
                line.push_str(&format!(" {name} {v:.4}"));
            }
        }
        if let Some(a) = record.disc_accuracy {
            line.push_str(&format!(" disc_accuracy {a:.3}"));
        }
        log_line(&mut out, opts.verbose, &line)?;
        if let Some(w) = collapse_warning(epoch, &accs) {
            log_line(&mut out, opts.verbose, &format!("warning: {w}"))?;
            warnings.push(w);
        }
        records.push(record);
    }

    let mut artifacts = Vec::new();
    if let Some(mut o) = out {
        let dir = o.dir.clone();
        let mut write = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, bytes)?;
            o.artifacts.push(p);
            Ok(())
        };
        let (_, best_ckpt) = best.expect("at least one epoch");
        write("student_best.ckpt", best_ckpt.to_bytes()?)?;
        write(
            "student_final.ckpt",
            Checkpoint::from_module(student_spec, &trainer.student).to_bytes()?,
        )?;
        if let Some(d) = &trainer.discriminator {
            if trainer.trains_discriminator() {
                write(
                    "discriminator_final.ckpt",
                    Checkpoint::from_module(ModelSpec::Discriminator(d.spec), d).to_bytes()?,
                )?;
            }
        }
        write("timing.csv", timing.into_bytes())?;
        for name in ["metrics.csv", "losses.csv", "run.log"] {
            o.artifacts.push(dir.join(name));
        }
        o.metrics.flush()?;
        o.losses.flush()?;
        let list: Vec<String> = o.artifacts.iter().map(|p| p.display().to_string()).collect();
        writeln!(o.log, "artifacts: {}", list.join(" "))?;
        o.log.flush()?;
        artifacts = o.artifacts;
    }
    Ok(TrainingRun {
        mode: cfg.mode,
        records,
        warnings,
        artifacts,
        student: trainer.student,
        discriminator: trainer.discriminator,
    })
}

fn expect_mode(cfg: &ExperimentConfig, mode: TrainMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Config(format!(
            "mode: expected {}, configuration says {}",
            mode.label(),
            cfg.mode.label()
        )));
    }
    Ok(())
}

/// Labels-only training.
pub fn train_supervised(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, opts: &RunOptions) -> Result<TrainingRun> {
    expect_mode(cfg, TrainMode::Baseline)?;
    run_experiment(cfg, train, test, TeacherSource::None, opts)
}

/// Distillation against stored teacher rows.
pub fn train_kd(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    store: &TeacherLogitsStore,
    opts: &RunOptions,
) -> Result<TrainingRun> {
    expect_mode(cfg, TrainMode::Kd)?;
    run_experiment(cfg, train, test, TeacherSource::Store(store), opts)
}

/// Alternating discriminator and student updates against stored teacher rows.
pub fn train_gan(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    store: &TeacherLogitsStore,
    opts: &RunOptions,
) -> Result<TrainingRun> {
    expect_mode(cfg, TrainMode::Gan)?;
    run_experiment(cfg, train, test, TeacherSource::Store(store), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_detected_at_both_extremes() {
        assert!(collapse_warning(2, &[1.0, 0.995, 1.0]).unwrap().contains("100%"));
        assert!(collapse_warning(2, &[0.5, 0.505, 0.495]).unwrap().contains("50%"));
        assert!(collapse_warning(2, &[0.5, 0.7, 1.0]).is_none());
        assert!(collapse_warning(2, &[]).is_none());
    }

    #[test]
    fn csv_row_matches_header_width() {
        let r = EpochRecord {
            epoch: 0,
            lr: 0.1,
            losses: Default::default(),
            train_error: 50.0,
            test_error: 40.0,
            disc_accuracy: None,
            seconds: 1.0,
        };
        let cols = |s: &str| s.trim_end().split(',').count();
        assert_eq!(cols(&EpochRecord::csv_header()), cols(&r.csv_row()));
    }
}
