use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kgs4::corpus::{load_recording, synth_recording, write_recording};

const TINY: &str = r#"
preset = "tiny"
[synth]
n_chunks = 12
corpus_subjects = 3
task_subjects = 3
trials_per_class = 30
[train]
iterations = 4
batch_size = 4
finetune_batch_size = 16
max_epochs = 2
patience = 1
"#;

fn kgs4(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgs4"))
        .current_dir(dir)
        .env_remove("KGS4_OUT")
        .args(args)
        .output()
        .expect("running kgs4")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn synth(dir: &Path) -> PathBuf {
    let o = kgs4(dir, &["--config", "run.toml", "--out", "out", "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("out/synth")
}

fn raw_recordings(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let spec = vec![
            ("Fp1".to_string(), vec![(10.0, 20.0), (60.0, 5.0)]),
            ("Cz".to_string(), vec![(20.0, 10.0)]),
        ];
        let rec = synth_recording(&spec, 1.0, 20.0, 160.0, i as u64).unwrap();
        write_recording(&rec, dir.join(format!("rec{i}.erf"))).unwrap();
    }
}

#[test]
fn preprocess_converts_every_file() {
    let ws = workspace("");
    raw_recordings(&ws.path().join("raw"), 3);
    let o = kgs4(ws.path(), &["--out", "out", "preprocess", "--input", "raw"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 3);
    assert!(stdout.contains("rec0.erf: 2 of 2 channels kept, 20.0 s at 250 Hz"), "{stdout}");
    for i in 0..3 {
        let rec = load_recording(ws.path().join(format!("out/preprocess/rec{i}.erf"))).unwrap();
        assert_eq!(rec.fs, 250.0);
        assert_eq!(rec.n_samples(), 5000);
    }
}

#[test]
fn preprocess_reports_corrupt_files() {
    let ws = workspace("");
    let raw = ws.path().join("raw");
    raw_recordings(&raw, 3);
    fs::write(raw.join("rec1.erf"), b"ERF1 not really").unwrap();
    let o = kgs4(ws.path(), &["--out", "out", "preprocess", "--input", "raw"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rec1.erf"), "{}", stderr(&o));
    let written: Vec<_> = fs::read_dir(ws.path().join("out/preprocess"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "erf"))
        .collect();
    assert_eq!(written.len(), 2);
}

#[test]
fn preprocess_without_input_fails() {
    let ws = workspace("");
    fs::create_dir(ws.path().join("raw")).unwrap();
    let o = kgs4(ws.path(), &["--out", "out", "preprocess", "--input", "raw"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no input"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_field() {
    let ws = workspace("[train]\nbatch_size = \"many\"\n");
    let o = kgs4(ws.path(), &["--config", "run.toml", "--out", "out", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));
    assert!(!ws.path().join("out").exists());

    let ws = workspace("[model]\nn_state = 3\n");
    let o = kgs4(ws.path(), &["--config", "run.toml", "synth"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let o = kgs4(ws.path(), &["pretrain", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(kgs4(ws.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn pretrain_labels_runs_by_objective() {
    for (objective, label) in [("vanilla", "vanilla-s4"), ("knowledge", "knowledge-s4")] {
        let ws = workspace(&format!("{TINY}objective = \"{objective}\"\n"));
        synth(ws.path());
        let o = kgs4(ws.path(), &["--config", "run.toml", "--out", "out", "pretrain", "--corpus", "out/synth/corpus"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let run = ws.path().join("out").join(label);
        assert!(run.join("checkpoints").join(format!("{label}.ckpt")).is_file());
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["experiment_id"], label);
        assert_eq!(manifest["status"], "ok");
        assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 5);
    }
}

#[test]
fn commands_are_rerunnable() {
    let ws = workspace(TINY);
    let out = synth(ws.path());
    let first = fs::read(out.join("task/subject-00.erf")).unwrap();
    let args = ["--config", "run.toml", "--out", "out", "pretrain", "--corpus", "out/synth/corpus"];
    assert!(kgs4(ws.path(), &args).status.success());
    let ckpt = ws.path().join("out/knowledge-s4/checkpoints/knowledge-s4.ckpt");
    let first_ckpt = fs::read(&ckpt).unwrap();
    synth(ws.path());
    assert_eq!(fs::read(out.join("task/subject-00.erf")).unwrap(), first);
    let o = kgs4(ws.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&ckpt).unwrap(), first_ckpt);

    // A different run may not reuse the experiment id.
    let o = kgs4(ws.path(), &["--config", "run.toml", "--out", "out", "--seed", "9", "pretrain", "--corpus", "out/synth/corpus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("already used"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_three() {
    let ws = workspace(&TINY.replace("iterations = 4", "iterations = 30\nlr = 1e300"));
    synth(ws.path());
    let o = kgs4(ws.path(), &["--config", "run.toml", "--out", "out", "pretrain", "--corpus", "out/synth/corpus"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let manifest = fs::read_to_string(ws.path().join("out/knowledge-s4/manifest.json")).unwrap();
    assert!(manifest.contains("failed"));
}

#[test]
fn finetune_needs_a_checkpoint() {
    let ws = workspace(TINY);
    synth(ws.path());
    let o = kgs4(ws.path(), &["--config", "run.toml", "--out", "out", "finetune", "--task", "out/synth/task"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
    let o = kgs4(
        ws.path(),
        &["--config", "run.toml", "--out", "out", "finetune", "--task", "out/synth/task", "--checkpoint", "nope.ckpt"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));
}

#[test]
fn scratch_finetune_runs_every_fold() {
    let ws = workspace(&format!("{TINY}mode = \"scratch\"\nfreeze_policy = \"fully_trainable\"\n"));
    synth(ws.path());
    let o = kgs4(ws.path(), &["--config", "run.toml", "--out", "out", "finetune", "--task", "out/synth/task"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = ws.path().join("out/finetune-fully-trainable-fully_trainable");
    let csv = fs::read_to_string(run.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("fully-trainable,finetune_fraction,1.0,0,"), "{csv}");
    let folds: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("folds.json")).unwrap()).unwrap();
    assert_eq!(folds.as_array().unwrap().len(), 3);
}

#[test]
fn sweep_then_report() {
    let ws = workspace(TINY);
    synth(ws.path());
    let o = kgs4(ws.path(), &["--config", "run.toml", "--out", "out", "pretrain", "--corpus", "out/synth/corpus"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = kgs4(
        ws.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "out",
            "sweep",
            "--axis",
            "finetune_fraction",
            "--values",
            "1.0,0.5,0.3,0.1",
            "--task",
            "out/synth/task",
            "--checkpoint",
            "out/knowledge-s4/checkpoints/knowledge-s4.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = ws.path().join("out/sweep-finetune_fraction-knowledge-s4");
    let summary = fs::read_to_string(run.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5, "{summary}");
    let results = fs::read_to_string(run.join("results.csv")).unwrap();
    let mut fractions: Vec<&str> = results.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    fractions.dedup();
    assert_eq!(fractions, ["1.0", "0.5", "0.3", "0.1"]);
    assert!(fs::metadata(run.join("finetune_fraction.svg")).unwrap().len() > 0);

    let o = kgs4(ws.path(), &["--out", "out", "report", "--results", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(ws.path().join("out/report/report.md")).unwrap();
    assert!(md.contains("| knowledge-s4 | 3 |"), "{md}");
    assert!(md.contains("## Accuracy by finetune_fraction"));
    assert!(ws.path().join("out/report/finetune_fraction.svg").is_file());
}

#[test]
fn report_without_results_fails() {
    let ws = workspace("");
    fs::create_dir(ws.path().join("empty")).unwrap();
    let o = kgs4(ws.path(), &["--out", "out", "report", "--results", "empty"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no results"), "{}", stderr(&o));
}

#[test]
fn bandpower_writes_one_row_per_cell() {
    let ws = workspace(TINY);
    synth(ws.path());
    let o = kgs4(ws.path(), &["--config", "run.toml", "--out", "out", "bandpower", "--input", "out/synth/corpus"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(ws.path().join("out/bandpower/bandpower.csv")).unwrap();
    // 12 chunks × 2 channels × 5 bands × 4 windows, plus the header
    assert_eq!(csv.lines().count(), 12 * 2 * 5 * 4 + 1);
}

#[test]
fn output_root_comes_from_the_environment() {
    let ws = workspace(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_kgs4"))
        .current_dir(ws.path())
        .env("KGS4_OUT", "elsewhere")
        .args(["--config", "run.toml", "synth"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path().join("elsewhere/synth/manifest.json").is_file());
}
