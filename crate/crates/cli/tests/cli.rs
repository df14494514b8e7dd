use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prefrobust_cli::sha256_hex;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prefrobust"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn hash(path: impl AsRef<Path>) -> String {
    sha256_hex(&fs::read(path).unwrap())
}

const TINY_MANIFEST: &str = "manifest.n_tasks = 1\nmanifest.candidates_per_task = 4\nmanifest.pairs_per_task = 1\nmanifest.rollouts = 1\n";

const TINY_BENCH: &str = "manifest.n_tasks = 2\nmanifest.candidates_per_task = 5\nmanifest.pairs_per_task = 6\nmanifest.repeats = 5\nmanifest.rollouts = 1\ntrain.epochs = 2\neval.pools = 1\neval.pool_size = 3\neval.references = 2\neval.rollouts = 1\n";

const SMALL_ENV: &str = "env.preset = desk\nenv.n_arms = 12\nenv.budget = 2\nenv.horizon = 8\n";

#[test]
fn gen_data_tiny_manifest_is_one_line_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "m.cfg", TINY_MANIFEST);
    assert!(run(dir.path(), &["gen-data", "--config", "m.cfg", "--out", "a.jsonl"]).status.success());
    assert!(run(dir.path(), &["gen-data", "--config", "m.cfg", "--out", "b.jsonl"]).status.success());
    let text = fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(hash(dir.path().join("a.jsonl")), hash(dir.path().join("b.jsonl")));
    let record: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a.jsonl.run.json")).unwrap()).unwrap();
    assert_eq!(record["outputs"][0]["sha256"], hash(dir.path().join("a.jsonl")));
    assert_eq!(record["seed"], "0");
}

#[test]
fn gen_data_full_scale_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "m.cfg",
        "manifest.n_tasks = 50\nmanifest.candidates_per_task = 20\nmanifest.pairs_per_task = 190\nmanifest.rollouts = 1\n",
    );
    write(dir.path(), "env.cfg", SMALL_ENV);
    assert!(run(dir.path(), &["gen-data", "--config", "m.cfg", "--env", "env.cfg", "--out", "d.jsonl"]).status.success());
    assert_eq!(fs::read_to_string(dir.path().join("d.jsonl")).unwrap().lines().count(), 9500);
}

#[test]
fn gen_data_malformed_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "m.cfg", "manifest.n_tasks = two\n");
    assert_eq!(run(dir.path(), &["gen-data", "--config", "m.cfg", "--out", "d.jsonl"]).status.code(), Some(2));
    write(dir.path(), "m.cfg", "manifest.pairs_per_task = 1000\n");
    assert_eq!(run(dir.path(), &["gen-data", "--config", "m.cfg", "--out", "d.jsonl"]).status.code(), Some(2));
    write(dir.path(), "m.cfg", "manifst.n_tasks = 2\n");
    assert_eq!(run(dir.path(), &["gen-data", "--config", "m.cfg", "--out", "d.jsonl"]).status.code(), Some(2));
}

fn tiny_data(dir: &Path) {
    write(dir, "m.cfg", "manifest.n_tasks = 2\nmanifest.candidates_per_task = 5\nmanifest.pairs_per_task = 6\nmanifest.rollouts = 1\n");
    write(dir, "env.cfg", SMALL_ENV);
    assert!(run(dir, &["gen-data", "--config", "m.cfg", "--env", "env.cfg", "--out", "d.jsonl"]).status.success());
}

#[test]
fn train_runs_and_zero_epochs_keep_initialization() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    write(dir.path(), "t.cfg", "train.method = dpo-pro\ndro.rho = 0.1\ntrain.epochs = 3\nnoise.kind = flip\nnoise.alpha = 0.3\n");
    assert!(run(dir.path(), &["train", "--config", "t.cfg", "--data", "d.jsonl", "--out", "run"]).status.success());
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,loss,mean_abs_margin"));
    assert_eq!(metrics.lines().count(), 4);

    write(dir.path(), "z.cfg", "train.method = dpo\ntrain.epochs = 0\n");
    assert!(run(dir.path(), &["train", "--config", "z.cfg", "--data", "d.jsonl", "--out", "zero"]).status.success());
    let ckpt: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("zero/checkpoint.json")).unwrap()).unwrap();
    assert!(ckpt["theta"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    assert_eq!(ckpt["theta"], ckpt["theta_ref"]);
    assert!(dir.path().join("zero/run.json").exists());
}

#[test]
fn train_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let code = |cfg: &str| {
        write(dir.path(), "t.cfg", cfg);
        run(dir.path(), &["train", "--config", "t.cfg", "--data", "d.jsonl", "--out", "run"]).status.code()
    };
    assert_eq!(code("train.method = rdpo\nrdpo.eps = 0.5\n"), Some(2));
    assert_eq!(code("train.method = ppo\n"), Some(2));
    assert_eq!(code("train.method = dpo\ndro.rho = 0.1\n"), Some(2));
    assert_eq!(code("train.method = dpo-pro\ndro.rho = 0.1\ntrain.learning_rate = 1e308\ntrain.epochs = 3\n"), Some(3));
    assert_eq!(run(dir.path(), &["train", "--config", "t.cfg", "--data", "missing.jsonl", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn eval_writes_report_and_per_task_csv() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    write(dir.path(), "t.cfg", "train.method = dpo-pro\ndro.rho = 0.1\ntrain.epochs = 2\n");
    write(dir.path(), "b.cfg", TINY_BENCH);
    assert!(run(dir.path(), &["train", "--config", "t.cfg", "--data", "d.jsonl", "--env", "env.cfg", "--out", "run"]).status.success());
    let args = ["eval", "--checkpoint", "run/checkpoint.json", "--data", "d.jsonl", "--env", "env.cfg", "--config", "b.cfg", "--out", "ev"];
    assert!(run(dir.path(), &args).status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["n_eval"], 4);
    let csv = fs::read_to_string(dir.path().join("ev/per_task.csv")).unwrap();
    assert_eq!(csv.lines().collect::<Vec<_>>()[0], "task_id,win_rate,n");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn sweep_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "b.cfg", TINY_BENCH);
    write(dir.path(), "env.cfg", SMALL_ENV);
    let base = ["sweep", "--config", "b.cfg", "--env", "env.cfg"];
    let one = [&base[..], &["--alphas", "0.3", "--methods", "dpo", "--seed", "4", "--out", "one"]].concat();
    assert!(run(dir.path(), &one).status.success());
    let rows = fs::read_to_string(dir.path().join("one/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.lines().nth(1).unwrap().starts_with("dpo,flip,0.3,4,"));
    assert!(rows.lines().nth(1).unwrap().ends_with(",ok"));

    let grid = [&base[..], &["--alphas", "0,0.3", "--methods", "dpo,dpo-pro", "--seed", "0..10", "--out", "grid"]].concat();
    assert!(run(dir.path(), &grid).status.success());
    assert_eq!(fs::read_to_string(dir.path().join("grid/sweep.csv")).unwrap().lines().count(), 41);

    let bad = [&base[..], &["--methods", "ppo", "--out", "bad"]].concat();
    assert_eq!(run(dir.path(), &bad).status.code(), Some(2));
}

fn arms_file(dir: &Path, name: &str, arms: &[[[[f64; 2]; 2]; 2]]) {
    let text: String = arms
        .iter()
        .map(|t| serde_json::json!({"transitions": t, "features": {"youngest_age": 1}}).to_string() + "\n")
        .collect();
    write(dir, name, &text);
}

fn whittle_rows(dir: &Path, out: &str) -> Vec<(usize, usize, f64)> {
    fs::read_to_string(dir.join(out))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn whittle_identical_transitions_give_zero() {
    let dir = tempfile::tempdir().unwrap();
    let same = [[[0.3, 0.7], [0.3, 0.7]], [[0.6, 0.4], [0.6, 0.4]]];
    arms_file(dir.path(), "arms.jsonl", &[same, same, same]);
    write(dir.path(), "p.txt", "s + 2 * (s and youngest_age)\n");
    assert!(run(dir.path(), &["whittle", "--env", "arms.jsonl", "--program", "p.txt", "--out", "w.csv"]).status.success());
    let rows = whittle_rows(dir.path(), "w.csv");
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.2.abs() < 1e-5), "{rows:?}");
}

#[test]
fn whittle_deterministic_arm_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let det = [[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [0.0, 1.0]]];
    arms_file(dir.path(), "arms.jsonl", &[det]);
    write(dir.path(), "env.cfg", "env.arms = arms.jsonl\nenv.discount = 0.5\nenv.budget = 1\n");
    write(dir.path(), "p.txt", "s\n");
    assert!(run(dir.path(), &["whittle", "--env", "env.cfg", "--program", "p.txt", "--out", "w.csv"]).status.success());
    let rows = whittle_rows(dir.path(), "w.csv");
    assert!((rows[0].2 - 1.0).abs() < 1e-5 && rows[1].2.abs() < 1e-5, "{rows:?}");

    arms_file(dir.path(), "bad.jsonl", &[[[[0.5, 0.6], [0.0, 1.0]], [[0.0, 1.0], [0.0, 1.0]]]]);
    assert_eq!(run(dir.path(), &["whittle", "--env", "bad.jsonl", "--program", "p.txt", "--out", "x.csv"]).status.code(), Some(2));

    write(dir.path(), "dec.txt", "s - 2 * (s and youngest_age)\n");
    let out = run(dir.path(), &["whittle", "--env", "env.cfg", "--program", "dec.txt", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("arm 0"));

    write(dir.path(), "syn.txt", "s ** 2\n");
    assert_eq!(run(dir.path(), &["whittle", "--env", "env.cfg", "--program", "syn.txt", "--out", "x.csv"]).status.code(), Some(2));
}

#[test]
fn curve_emits_grid_per_rho() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["curve", "--rho", "0.1,4", "--out", "c.csv"]).status.success());
    let text = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 1001);
    assert!(text.contains("\n0.1,0.5,0.15811388300841897,0.15811388300841897\n"));
    assert!(dir.path().join("c.csv.run.json").exists());
}

#[test]
fn jobs_zero_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--jobs", "0", "curve", "--out", "c.csv"]).status.code(), Some(2));
}
