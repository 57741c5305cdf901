//! Median-over-seeds summaries of run directories.

use std::collections::BTreeMap;
use std::path::Path;

use kdgan::engine::{median, ExperimentConfig, TrainMode};

use crate::{CliResult, Failure};

/// What a finished run directory records.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub cfg: ExperimentConfig,
    pub final_test_error: f64,
    pub best_test_error: f64,
    pub final_train_error: f64,
}

/// Temperature, loss composition and discriminator depth, blank where the
/// mode does not use them.
pub fn mode_fields(cfg: &ExperimentConfig) -> (String, String, String) {
    match cfg.mode {
        TrainMode::Baseline => (String::new(), String::new(), String::new()),
        TrainMode::Kd => (cfg.kd.temperature.to_string(), String::new(), String::new()),
        TrainMode::Gan => (String::new(), cfg.gan.losses.clone(), cfg.gan.disc_depth.to_string()),
    }
}

fn column(header: &[&str], name: &str, file: &Path) -> CliResult<usize> {
    header
        .iter()
        .position(|h| *h == name)
        .ok_or_else(|| Failure::Validation(format!("{}: no {name} column", file.display())))
}

/// Reads `config.toml` and `metrics.csv` of a run; `None` when the
/// directory holds no metrics.
pub fn read_run(dir: &Path) -> CliResult<Option<RunSummary>> {
    let metrics = dir.join("metrics.csv");
    let config = dir.join("config.toml");
    if !metrics.is_file() || !config.is_file() {
        return Ok(None);
    }
    let cfg = ExperimentConfig::load(&config)?;
    let text = std::fs::read_to_string(&metrics)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let (test, train) = (
        column(&header, "test_error", &metrics)?,
        column(&header, "train_error", &metrics)?,
    );
    let parse = |row: &[&str], i: usize| -> CliResult<f64> {
        row.get(i)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Failure::Validation(format!("{}: malformed row", metrics.display())))
    };
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let row: Vec<&str> = line.split(',').collect();
        rows.push((parse(&row, test)?, parse(&row, train)?));
    }
    let Some(&(final_test_error, final_train_error)) = rows.last() else {
        return Err(Failure::Validation(format!("{}: no epochs recorded", metrics.display())));
    };
    Ok(Some(RunSummary {
        cfg,
        final_test_error,
        best_test_error: rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min),
        final_train_error,
    }))
}

pub const SUMMARY_HEADER: &str =
    "student,mode,temperature,losses,disc_depth,epochs,seeds,median_final_test_error,median_best_test_error,median_final_train_error";

/// One row per configuration with the seed left out, in sorted order.
pub fn summarize(runs: &[RunSummary]) -> String {
    let mut groups: BTreeMap<(String, String, String, String, String, usize), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        let (t, l, d) = mode_fields(&r.cfg);
        let key = (r.cfg.student_spec().name(), r.cfg.mode.label().to_string(), t, l, d, r.cfg.epochs);
        groups.entry(key).or_default().push(r);
    }
    let mut out = format!("{SUMMARY_HEADER}\n");
    for ((student, mode, t, l, d, epochs), members) in groups {
        let med = |f: fn(&RunSummary) -> f64| median(&mut members.iter().map(|r| f(r)).collect::<Vec<_>>());
        out.push_str(&format!(
            "{student},{mode},{t},{l},{d},{epochs},{},{},{},{}\n",
            members.len(),
            med(|r| r.final_test_error),
            med(|r| r.best_test_error),
            med(|r| r.final_train_error)
        ));
    }
    out
}

/// Summarizes every run directory directly under `runs` into `out`.
pub fn write_report(runs: &Path, out: &Path) -> CliResult<String> {
    if !runs.is_dir() {
        return Err(Failure::Validation(format!("{} is not a directory", runs.display())));
    }
    let mut entries: Vec<_> = std::fs::read_dir(runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let mut summaries = Vec::new();
    for dir in entries {
        summaries.extend(read_run(&dir)?);
    }
    if summaries.is_empty() {
        return Err(Failure::Validation(format!("no run directories under {}", runs.display())));
    }
    let table = summarize(&summaries);
    std::fs::write(out, &table)?;
    Ok(table)
}
