//! Experiment grids: every combination of the requested axes becomes one
//! run directory, and one row of `results.csv`.

use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use clap::Args;
use kdgan::architectures::{count_parameters, Wrn};
use kdgan::engine::{ExperimentConfig, TrainMode};
use rand::SeedableRng;

use crate::report::{read_run, RunSummary};
use crate::{prepare_dir, print_artifacts, train_student, CliResult, ConfigArgs, Failure, OutArgs};

#[derive(Args, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Training modes: baseline, kd, gan.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
    /// Temperatures of kd runs.
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    /// Loss compositions of gan runs, e.g. L_S+L_GAN.
    #[arg(long, value_delimiter = ',')]
    pub losses: Vec<String>,
    /// Discriminator depths of gan runs.
    #[arg(long, value_delimiter = ',')]
    pub disc_depths: Vec<usize>,
    /// Student networks as DEPTH-WIDEN, e.g. 10-1.
    #[arg(long, value_delimiter = ',')]
    pub students: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Concurrent training processes; 1 runs everything in this process.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub verbose: bool,
}

/// One grid point.
#[derive(Clone, Debug)]
pub struct Point {
    pub name: String,
    pub cfg: ExperimentConfig,
}

fn parse_mode(s: &str) -> CliResult<TrainMode> {
    match s {
        "baseline" => Ok(TrainMode::Baseline),
        "kd" => Ok(TrainMode::Kd),
        "gan" => Ok(TrainMode::Gan),
        other => Err(Failure::Validation(format!("--modes: unknown mode {other:?}"))),
    }
}

fn parse_student(s: &str) -> CliResult<(usize, usize)> {
    let bad = || Failure::Validation(format!("--students: expected DEPTH-WIDEN, got {s:?}"));
    let (d, w) = s.split_once('-').ok_or_else(bad)?;
    Ok((d.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// Expands the axes. Temperatures only vary kd runs; loss compositions and
/// discriminator depths only vary gan runs.
pub fn expand(base: &ExperimentConfig, args: &SweepArgs) -> CliResult<Vec<Point>> {
    fn axis<T: Clone>(values: &[T]) -> Vec<Option<T>> {
        if values.is_empty() {
            vec![None]
        } else {
            values.iter().cloned().map(Some).collect()
        }
    }
    let modes = args.modes.iter().map(|m| parse_mode(m)).collect::<CliResult<Vec<_>>>()?;
    let students = args
        .students
        .iter()
        .map(|s| parse_student(s))
        .collect::<CliResult<Vec<_>>>()?;
    let mut points = Vec::new();
    for student in axis(&students) {
        for mode in axis(&modes) {
            let m = mode.unwrap_or(base.mode);
            let temps = if m == TrainMode::Kd { axis(&args.temperatures) } else { vec![None] };
            let losses = if m == TrainMode::Gan { axis(&args.losses) } else { vec![None] };
            let depths = if m == TrainMode::Gan { axis(&args.disc_depths) } else { vec![None] };
            for t in &temps {
                for l in &losses {
                    for d in &depths {
                        for seed in axis(&args.seeds) {
                            let mut cfg = base.clone();
                            let mut parts = Vec::new();
                            if let Some((depth, widen)) = student {
                                cfg.student.depth = depth;
                                cfg.student.widen = widen;
                                parts.push(format!("wrn-{depth}-{widen}"));
                            }
                            if let Some(m) = mode {
                                cfg.mode = m;
                                parts.push(m.label().to_string());
                            }
                            if let Some(t) = t {
                                cfg.kd.temperature = *t;
                                parts.push(format!("T={t}"));
                            }
                            if let Some(l) = l {
                                cfg.gan.losses = l.clone();
                                parts.push(format!("losses={l}"));
                            }
                            if let Some(d) = d {
                                cfg.gan.disc_depth = *d;
                                parts.push(format!("disc={d}"));
                            }
                            if let Some(s) = seed {
                                cfg.seed = s;
                                parts.push(format!("seed={s}"));
                            }
                            cfg.validate()?;
                            let name = if parts.is_empty() { "run".to_string() } else { parts.join("_") };
                            points.push(Point { name, cfg });
                        }
                    }
                }
            }
        }
    }
    Ok(points)
}

pub const RESULTS_HEADER: &str =
    "run,student,student_params,mode,temperature,losses,disc_depth,seed,final_test_error,best_test_error,final_train_error";

fn result_row(name: &str, s: &RunSummary) -> CliResult<String> {
    let spec = s.cfg.student_spec();
    let params = count_parameters(&Wrn::<f32>::new(spec, &mut kdgan::layers::Rng::seed_from_u64(0))?);
    let (t, l, d) = crate::report::mode_fields(&s.cfg);
    Ok(format!(
        "{name},{},{params},{},{t},{l},{d},{},{},{},{}",
        spec.name(),
        s.cfg.mode.label(),
        s.cfg.seed,
        s.final_test_error,
        s.best_test_error,
        s.final_train_error
    ))
}

fn wait_all(children: &mut Vec<(String, Child)>) -> CliResult<()> {
    for (name, mut child) in children.drain(..) {
        let status = child.wait()?;
        if !status.success() {
            return Err(Failure::Runtime(format!("run {name} failed with {status}")));
        }
    }
    Ok(())
}

fn spawn(config: &Path, dir: &Path, verbose: bool) -> CliResult<Child> {
    let exe = std::env::current_exe()?;
    let mut cmd = Command::new(exe);
    cmd.arg("train-student")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir)
        .arg("--overwrite");
    if verbose {
        cmd.arg("--verbose");
    }
    Ok(cmd.spawn()?)
}

pub fn run(args: &SweepArgs) -> CliResult<()> {
    if args.jobs == 0 {
        return Err(Failure::Validation("--jobs: must be at least 1".into()));
    }
    let base = args.config.load()?;
    let points = expand(&base, args)?;
    let root = args.out.prepare()?;
    let mut artifacts = Vec::new();
    let mut dirs: Vec<PathBuf> = Vec::new();
    let mut children = Vec::new();
    for p in &points {
        let dir = root.join(&p.name);
        prepare_dir(&dir, args.out.overwrite)?;
        let config = root.join(format!("{}.toml", p.name));
        std::fs::write(&config, p.cfg.to_toml()?)?;
        artifacts.push(config.clone());
        println!("run {}", p.name);
        if args.jobs == 1 {
            artifacts.extend(train_student(&p.cfg, &dir, None, 0, args.verbose)?);
        } else {
            if children.len() == args.jobs {
                wait_all(&mut children)?;
            }
            children.push((p.name.clone(), spawn(&config, &dir, args.verbose)?));
        }
        dirs.push(dir);
    }
    wait_all(&mut children)?;

    let mut csv = format!("{RESULTS_HEADER}\n");
    for (p, dir) in points.iter().zip(&dirs) {
        let summary = read_run(dir)?
            .ok_or_else(|| Failure::Runtime(format!("run {} left no metrics.csv", p.name)))?;
        csv.push_str(&result_row(&p.name, &summary)?);
        csv.push('\n');
        if args.jobs > 1 {
            artifacts.push(dir.clone());
        }
    }
    let results = root.join("results.csv");
    std::fs::write(&results, &csv)?;
    print!("{csv}");
    artifacts.push(results);
    print_artifacts(&artifacts);
    Ok(())
}
