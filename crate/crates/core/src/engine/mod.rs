//! Baseline, distillation and adversarial training loops, evaluation and
//! run artifacts.
//!
//! A run directory holds `config.toml` (every setting, defaults included),
//! `metrics.csv` (one row per epoch), `losses.csv` (one row per step),
//! `timing.csv` (wall-clock per epoch, kept apart so the metrics stay
//! reproducible), `run.log` and student/discriminator checkpoints.

mod config;
mod eval;
mod train;

pub use config::{
    DataConfig, DataSource, ExperimentConfig, GanConfig, KdConfig, OptimConfig, TeacherConfig, TrainMode, WrnConfig,
};
pub use eval::{argmax, evaluate, measure_inference_time, median, prediction_histogram, PredictionHistogram};
pub use train::{
    parameter_checksum, run_experiment, train_gan, train_kd, train_supervised, EpochRecord, RunOptions, StepOutcome,
    TeacherSource, Trainer, TrainingRun, STUDENT_DROPOUT_STREAM,
};
