//! `kdgan`: teacher training, logits export, student training, evaluation,
//! sweeps and reports.

mod overrides;
mod report;
mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdgan::architectures::{load_checkpoint, Model};
use kdgan::data::{export_teacher_logits, TeacherLogitsStore};
use kdgan::engine::{
    evaluate, measure_inference_time, prediction_histogram, run_experiment, ExperimentConfig, RunOptions,
    TeacherSource, TrainMode, WrnConfig,
};

/// Exit status 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<kdgan::Error> for Failure {
    fn from(e: kdgan::Error) -> Self {
        use kdgan::Error as E;
        match e {
            E::Config(_)
            | E::InvalidArgument(_)
            | E::InvalidSpec(_)
            | E::StoreMismatch { .. }
            | E::LabelOutOfRange { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "kdgan", version, about = "Adversarial knowledge distillation for wide residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides a configuration key, e.g. `--set kd.temperature=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<ExperimentConfig> {
        overrides::load_config(&self.config, self.seed, &self.sets)
    }
}

#[derive(Args, Clone)]
pub struct OutArgs {
    /// Output directory; must be absent or empty unless --overwrite is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

impl OutArgs {
    pub fn prepare(&self) -> CliResult<PathBuf> {
        prepare_dir(&self.out, self.overwrite)?;
        Ok(self.out.clone())
    }
}

pub fn prepare_dir(dir: &Path, overwrite: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !overwrite {
            return Err(Failure::Validation(format!(
                "output directory {} is not empty; pass --overwrite to reuse it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Subcommand)]
enum Command {
    /// Trains the teacher network described by the [teacher] section.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        verbose: bool,
    },
    /// Writes the teacher's logits for every training image.
    ExportLogits {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint; defaults to teacher.checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Store path; defaults to teacher.logits.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 250)]
        batch_size: usize,
    },
    /// Trains a student in the configured mode.
    TrainStudent {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Also write the prediction histogram of this class on the test set.
        #[arg(long)]
        histogram_class: Option<usize>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        verbose: bool,
    },
    /// Test error of a checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the histogram and timing CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        histogram_class: Option<usize>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Also time forwards of this many random images.
        #[arg(long)]
        timing_batch: Option<usize>,
        #[arg(long, default_value_t = 5)]
        timing_repeats: usize,
    },
    /// Runs a grid of student trainings and collects their results.
    Sweep(sweep::SweepArgs),
    /// Aggregates run directories into a median-over-seeds table.
    Report {
        /// Directory whose subdirectories are runs.
        #[arg(long)]
        runs: PathBuf,
        /// Summary CSV; defaults to <runs>/summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::TrainTeacher { config, out, verbose } => train_teacher(&config, &out, verbose),
        Command::ExportLogits {
            config,
            checkpoint,
            output,
            batch_size,
        } => export_logits(&config, checkpoint, output, batch_size),
        Command::TrainStudent {
            config,
            out,
            histogram_class,
            bins,
            verbose,
        } => {
            let cfg = config.load()?;
            let dir = out.prepare()?;
            let artifacts = train_student(&cfg, &dir, histogram_class, bins, verbose)?;
            print_artifacts(&artifacts);
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            out,
            histogram_class,
            bins,
            timing_batch,
            timing_repeats,
        } => eval(&config, &checkpoint, out, histogram_class, bins, timing_batch, timing_repeats),
        Command::Sweep(args) => sweep::run(&args),
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs.join("summary.csv"));
            let table = report::write_report(&runs, &out)?;
            print!("{table}");
            print_artifacts(&[out]);
            Ok(())
        }
    }
}

pub fn print_artifacts(paths: &[PathBuf]) {
    let list: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    println!("artifacts: {}", list.join(" "));
}

fn train_teacher(config: &ConfigArgs, out: &OutArgs, verbose: bool) -> CliResult<()> {
    let mut cfg = config.load()?;
    cfg.mode = TrainMode::Baseline;
    cfg.student = WrnConfig {
        depth: cfg.teacher.depth,
        widen: cfg.teacher.widen,
        dropout: cfg.teacher.dropout,
    };
    cfg.validate()?;
    let dir = out.prepare()?;
    let (train, test) = cfg.data.load()?;
    let opts = RunOptions {
        out_dir: Some(dir.clone()),
        verbose,
    };
    let run = run_experiment(&cfg, &train, &test, TeacherSource::None, &opts)?;
    let teacher = dir.join("teacher.ckpt");
    std::fs::copy(dir.join("student_final.ckpt"), &teacher)?;
    println!(
        "teacher {} final test error {:.2}%",
        cfg.student_spec().name(),
        run.final_test_error()
    );
    let mut artifacts = run.artifacts;
    artifacts.push(teacher);
    print_artifacts(&artifacts);
    Ok(())
}

fn export_logits(
    config: &ConfigArgs,
    checkpoint: Option<PathBuf>,
    output: Option<PathBuf>,
    batch_size: usize,
) -> CliResult<()> {
    let cfg = config.load()?;
    let ckpt = checkpoint.or_else(|| cfg.teacher.checkpoint.clone()).ok_or_else(|| {
        Failure::Validation("teacher.checkpoint: not set; pass --checkpoint or run train-teacher first".into())
    })?;
    let output = output
        .or_else(|| cfg.teacher.logits.clone())
        .ok_or_else(|| Failure::Validation("teacher.logits: not set; pass --output".into()))?;
    let bytes = std::fs::read(&ckpt)
        .map_err(|e| Failure::Validation(format!("cannot read teacher checkpoint {}: {e}", ckpt.display())))?;
    let mut model = kdgan::architectures::Checkpoint::from_bytes(&bytes)?.into_model()?;
    if matches!(model, Model::Discriminator(_)) {
        return Err(Failure::Validation(format!("{} holds a discriminator, not a teacher", ckpt.display())));
    }
    let (train, _) = cfg.data.load()?;
    let mut store = export_teacher_logits(&mut model, &train, batch_size)?;
    store.provenance = Some(format!(
        "checkpoint = {:?}\ncheckpoint_crc32 = \"{:08x}\"\ndata_source = {:?}\ntrain_images = {}\ndata_seed = {}\n",
        ckpt.display().to_string(),
        crc32fast::hash(&bytes),
        format!("{:?}", cfg.data.source).to_lowercase(),
        train.len(),
        cfg.data.data_seed
    ));
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let written = store.save(&output)?;
    println!("exported {} rows of {} logits", store.len(), store.num_classes());
    print_artifacts(&written);
    Ok(())
}

/// Loads whatever the mode needs from the teacher, or explains which
/// command produces it.
fn teacher_store(cfg: &ExperimentConfig) -> CliResult<Option<TeacherLogitsStore>> {
    if !cfg.mode.needs_teacher() || cfg.teacher.on_the_fly_dropout {
        return Ok(None);
    }
    let missing = |what: String| {
        Failure::Validation(format!(
            "{} mode needs teacher logits: {what}; run `kdgan export-logits` first",
            cfg.mode.label()
        ))
    };
    let path = cfg
        .teacher
        .logits
        .as_ref()
        .ok_or_else(|| missing("teacher.logits is not set".into()))?;
    if !path.exists() {
        return Err(missing(format!("{} does not exist", path.display())));
    }
    Ok(Some(TeacherLogitsStore::load(path)?))
}

pub fn train_student(
    cfg: &ExperimentConfig,
    dir: &Path,
    histogram_class: Option<usize>,
    bins: usize,
    verbose: bool,
) -> CliResult<Vec<PathBuf>> {
    let store = teacher_store(cfg)?;
    let (train, test) = cfg.data.load()?;
    let source = match (&store, cfg.mode.needs_teacher()) {
        (Some(s), _) => TeacherSource::Store(s),
        (None, true) => {
            let path = cfg.teacher.checkpoint.as_ref().expect("validated with on_the_fly_dropout");
            match load_checkpoint(path)? {
                Model::Wrn(w) => TeacherSource::OnTheFly(w),
                _ => {
                    return Err(Failure::Validation(format!(
                        "teacher.checkpoint: {} is not a WRN",
                        path.display()
                    )))
                }
            }
        }
        (None, false) => TeacherSource::None,
    };
    let opts = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        verbose,
    };
    let mut run = run_experiment(cfg, &train, &test, source, &opts)?;
    println!(
        "{} student {} final test error {:.2}% best {:.2}%",
        cfg.mode.label(),
        cfg.student_spec().name(),
        run.final_test_error(),
        run.best_test_error()
    );
    for w in &run.warnings {
        println!("warning: {w}");
    }
    let mut artifacts = run.artifacts.clone();
    if let Some(c) = histogram_class {
        let h = prediction_histogram(&mut run.student, &test, c, bins, cfg.eval_batch_size)?;
        let p = dir.join(format!("prediction_histogram_class{c}.csv"));
        std::fs::write(&p, h.to_csv())?;
        artifacts.push(p);
    }
    Ok(artifacts)
}

fn eval(
    config: &ConfigArgs,
    checkpoint: &Path,
    out: Option<PathBuf>,
    histogram_class: Option<usize>,
    bins: usize,
    timing_batch: Option<usize>,
    timing_repeats: usize,
) -> CliResult<()> {
    let cfg = config.load()?;
    if !checkpoint.exists() {
        return Err(Failure::Validation(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let mut model = load_checkpoint(checkpoint)?;
    let (_, test) = cfg.data.load()?;
    let err = evaluate(&mut model, &test, cfg.eval_batch_size)?;
    println!("test error: {err:.2}%");
    let mut artifacts = Vec::new();
    let dir = || -> CliResult<PathBuf> {
        let d = out
            .clone()
            .ok_or_else(|| Failure::Validation("--out is required for histogram or timing output".into()))?;
        std::fs::create_dir_all(&d)?;
        Ok(d)
    };
    if let Some(c) = histogram_class {
        let h = prediction_histogram(&mut model, &test, c, bins, cfg.eval_batch_size)?;
        println!(
            "class {c}: positive mean {:.4} over {}, negative mean {:.4} over {}",
            h.positive_mean, h.positive_count, h.negative_mean, h.negative_count
        );
        let p = dir()?.join(format!("prediction_histogram_class{c}.csv"));
        std::fs::write(&p, h.to_csv())?;
        artifacts.push(p);
    }
    if let Some(b) = timing_batch {
        let secs = measure_inference_time(&mut model, b, timing_repeats)?;
        println!("inference: {secs:.6} s per batch of {b}");
        let p = dir()?.join("inference_time.csv");
        std::fs::write(&p, format!("batch_size,repeats,seconds\n{b},{timing_repeats},{secs}\n"))?;
        artifacts.push(p);
    }
    print_artifacts(&artifacts);
    Ok(())
}
