use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdgan::architectures::{save_checkpoint, Checkpoint, ModelSpec, StubKind, StubModel};
use kdgan::engine::ExperimentConfig;

fn kdgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdgan")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, mode: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"mode = "{mode}"
seed = 1
epochs = 1
batch_size = 16
eval_batch_size = 16

[student]
depth = 10
widen = 1

[data]
num_classes = 4
train_size = 32
test_size = 16
difficulty = 0.2

[teacher]
depth = 10
widen = 1
{extra}
"#
    );
    let p = dir.join(format!("{mode}.toml"));
    std::fs::write(&p, text).unwrap();
    p
}

fn oracle_checkpoint(dir: &Path) -> PathBuf {
    let p = dir.join("oracle.ckpt");
    let ckpt = Checkpoint {
        spec: ModelSpec::Stub(StubModel::new(StubKind::Oracle, 4)),
        tensors: Vec::new(),
    };
    save_checkpoint(&p, &ckpt).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn last_line(o: &Output) -> String {
    stdout(o).lines().last().unwrap_or_default().to_string()
}

#[test]
fn eval_of_oracle_stub_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "baseline", "");
    let ckpt = oracle_checkpoint(dir.path());
    let o = kdgan(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test error: 0.00%"), "{}", stdout(&o));
}

#[test]
fn gan_without_store_names_export_logits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "gan", "");
    let out = dir.path().join("run");
    let o = kdgan(&["train-student", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("export-logits"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_one_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "baseline", "");
    let out = dir.path().join("run");
    let o = kdgan(&["train-student", "--config", s(&cfg), "--set", "epochs=0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
    let o = kdgan(&["train-student", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn non_empty_output_needs_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "baseline", "");
    let o = kdgan(&["train-student", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--overwrite"));
}

#[test]
fn rerun_reproduces_metrics_and_lists_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "baseline", "");
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = kdgan(&[
            "train-student",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--histogram-class",
            "1",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let line = last_line(&o);
        assert!(line.starts_with("artifacts: "));
        for f in ["metrics.csv", "student_final.ckpt", "config.toml", "prediction_histogram_class1.csv"] {
            assert!(line.contains(s(&out.join(f))), "{f} missing from {line}");
        }
        metrics.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn teacher_export_and_gan_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("logits/teacher.lgt");
    let teacher_dir = dir.path().join("teacher");
    let extra = format!(
        "checkpoint = {:?}\nlogits = {:?}\n",
        s(&teacher_dir.join("teacher.ckpt")),
        s(&store)
    );
    let cfg = tiny_config(dir.path(), "gan", &extra);
    let o = kdgan(&["train-teacher", "--config", s(&cfg), "--out", s(&teacher_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(last_line(&o).contains("teacher.ckpt"));

    let o = kdgan(&["export-logits", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let provenance = std::fs::read_to_string(format!("{}.provenance", s(&store))).unwrap();
    assert!(provenance.contains("checkpoint_crc32"));
    assert!(last_line(&o).contains(".provenance"));

    let out = dir.path().join("student");
    let o = kdgan(&["train-student", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("discriminator_final.ckpt").exists());
}

#[test]
fn temperature_sweep_writes_four_runs() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("oracle.lgt");
    let extra = format!("logits = {:?}\n", s(&store));
    let cfg = tiny_config(dir.path(), "kd", &extra);
    let ckpt = oracle_checkpoint(dir.path());
    let o = kdgan(&["export-logits", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = dir.path().join("sweep");
    let o = kdgan(&["sweep", "--config", s(&cfg), "--out", s(&out), "--temperatures", "1,2,5,10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 5, "{results}");
    for t in ["1", "2", "5", "10"] {
        assert!(out.join(format!("T={t}")).join("metrics.csv").exists());
    }
    assert!(last_line(&o).contains("results.csv"));
}

#[test]
fn parallel_sweep_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "baseline", "");
    let mut tables = Vec::new();
    for (name, jobs) in [("seq", "1"), ("par", "2")] {
        let out = dir.path().join(name);
        let o = kdgan(&["sweep", "--config", s(&cfg), "--out", s(&out), "--seeds", "0,1", "--jobs", jobs]);
        assert!(o.status.success(), "{}", stderr(&o));
        tables.push(std::fs::read_to_string(out.join("results.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn report_takes_median_over_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "baseline", "");
    let base = ExperimentConfig::load(&cfg_path).unwrap();
    let runs = dir.path().join("runs");
    for (seed, finals) in [(0u64, [9.0, 5.0]), (1, [8.0, 1.0]), (2, [7.0, 3.0])] {
        let d = runs.join(format!("seed={seed}"));
        std::fs::create_dir_all(&d).unwrap();
        let mut cfg = base.clone();
        cfg.seed = seed;
        std::fs::write(d.join("config.toml"), cfg.to_toml().unwrap()).unwrap();
        let mut csv = String::from("epoch,lr,train_error,test_error\n");
        for (e, v) in finals.iter().enumerate() {
            csv.push_str(&format!("{e},0.1,{},{v}\n", v + 1.0));
        }
        std::fs::write(d.join("metrics.csv"), csv).unwrap();
    }
    let o = kdgan(&["report", "--runs", s(&runs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(runs.join("summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    // Final errors 5, 1, 3: the middle order statistic is 3.
    assert_eq!(row[6], "3", "seed count");
    assert_eq!(row[7], "3", "median final test error");
    assert_eq!(row[8], "3", "median best test error");
    assert_eq!(row[9], "4", "median final train error");
}
