use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 7
eta = 0.5
steps = 12
batch_size = 4
eval_interval = 6
eval_batch_size = 16

[task]
kind = "copy"
size = 24
symbols = 3
max_len = 3

[model]
d_model = 8
heads = 2
layers = 1
ff_dim = 16
"#;

fn symae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symae")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = symae(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Training log without the wall-clock column.
fn log_without_time(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join("train_log.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let skip = header.iter().position(|h| *h == "wall_time").unwrap();
    text.lines()
        .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != skip).map(|(_, c)| c).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn same_config_and_seed_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["train", "--config", path(&config), "--out", path(out), "--quiet"]);
    }
    let log = log_without_time(&a);
    assert_eq!(log.len(), 13);
    assert_eq!(log, log_without_time(&b));
    assert_eq!(fs::read(a.join("eval.csv")).unwrap(), fs::read(b.join("eval.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());

    let c = dir.path().join("c");
    ok(&["train", "--config", path(&config), "--out", path(&c), "--seed", "8", "--quiet"]);
    assert_ne!(log, log_without_time(&c));
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", path(&config), "--out", path(&out), "--steps", "3", "--db", "vq", "--eta", "1", "--quiet"]);
    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("steps = 3"));
    assert!(resolved.contains("db = \"vq\""));
    assert!(resolved.contains("eta = 1.0"));
    assert_eq!(log_without_time(&out).len(), 4);
}

#[test]
fn empty_z_pool_with_z_reconstruction_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, format!("{TINY}\n[schedule]\nprobabilities = [0.5, 0.0, 0.5]\n").replace("eta = 0.5", "eta = 1.0")).unwrap();
    let out = symae(&["train", "--config", path(&config), "--out", path(&dir.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("z_recon") && err.contains("empty"), "{err}");
}

#[test]
fn invalid_values_are_all_reported() {
    let out = symae(&["train", "--eta", "1.5", "--steps", "0"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("eta 1.5") && err.contains("steps must be positive"), "{err}");
}

#[test]
fn eval_reproduces_the_last_logged_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", path(&config), "--out", path(&run), "--quiet"]);
    let evals = fs::read_to_string(run.join("eval.csv")).unwrap();
    let rows: Vec<&str> = evals.lines().collect();
    let checkpoint = run.join("checkpoint.bin");
    let corpus = run.join("corpus.tsv");
    for (direction, logged) in [("x-z", rows[rows.len() - 2]), ("z-x", rows[rows.len() - 1])] {
        let stdout = ok(&["eval", "--checkpoint", path(&checkpoint), "--corpus", path(&corpus), "--direction", direction]);
        let record = stdout.lines().last().unwrap();
        let logged = logged.split_once(',').unwrap().1;
        assert_eq!(record, logged, "{direction}");
    }
}

#[test]
fn eval_rejects_foreign_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", path(&config), "--out", path(&run), "--steps", "1", "--quiet"]);
    let foreign = dir.path().join("foreign.tsv");
    fs::write(&foreign, "walk twice\tI_WALK I_WALK\n").unwrap();
    let out = symae(&["eval", "--checkpoint", path(&run.join("checkpoint.bin")), "--corpus", path(&foreign)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabular"));
}

#[test]
fn generate_writes_corpus_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let stdout = ok(&["generate", "--task", "mini-scan", "--size", "100", "--eta", "0.1", "--seed", "1", "--out", path(&out)]);
    assert!(stdout.contains("100 pairs"));
    let count = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().count();
    assert_eq!(count("corpus.tsv"), 100);
    assert_eq!((count("parallel.tsv"), count("x_only.txt"), count("z_only.txt")), (10, 45, 45));
    assert!(out.join("vocab.x").exists() && out.join("vocab.z").exists());

    let again = dir.path().join("again");
    ok(&["generate", "--task", "mini-scan", "--size", "100", "--eta", "0.1", "--seed", "1", "--out", path(&again)]);
    assert_eq!(fs::read(out.join("corpus.tsv")).unwrap(), fs::read(again.join("corpus.tsv")).unwrap());
}
