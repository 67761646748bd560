use std::fs;

use symae::bottleneck::DbVariant;
use symae::datasets::{read_parallel, read_sequences};
use symae::experiment::{cmd_eval, cmd_generate, cmd_train, train, ExperimentConfig, ModelSection, TaskConfig};
use symae::model::SymbolicAutoencoder;
use symae::training::{read_log, Mode, ScheduleConfig, Strategy};
use symae::vocab::Side;

fn tiny(steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: 3,
        eta: 0.5,
        steps,
        batch_size: 4,
        eval_interval: 10,
        eval_batch_size: 32,
        task: TaskConfig::Copy { size: 30, symbols: 3, min_len: 1, max_len: 3 },
        model: ModelSection { d_model: Some(8), heads: Some(2), layers: Some(1), ff_dim: Some(16), ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn every_bottleneck_trains_end_to_end() {
    for db in [DbVariant::Softmax, DbVariant::Gumbel, DbVariant::Vq] {
        let result = train(&ExperimentConfig { db, ..tiny(30) }).unwrap();
        assert_eq!(result.log.len(), 30);
        assert_eq!(result.evals.len(), 6);
        let modes: std::collections::HashSet<Mode> = result.log.iter().map(|r| r.mode).collect();
        assert_eq!(modes.len(), 3, "{db}: joint training uses every mode");
        for row in &result.log {
            let recon = matches!(row.mode, Mode::XRecon | Mode::ZRecon);
            assert_eq!(row.effective_length.is_some(), recon);
            assert!(row.grad_norm.is_finite());
        }
    }
}

#[test]
fn supervised_loss_goes_down() {
    let config = ExperimentConfig {
        eta: 1.0,
        steps: 150,
        optimizer: symae::params::AdamConfig { learning_rate: 3e-3, ..Default::default() },
        ..tiny(150)
    };
    let log = train(&config).unwrap().log;
    let mean = |rows: &[symae::training::LogRow]| rows.iter().map(|r| r.l_xz.unwrap() + r.l_zx.unwrap()).sum::<f64>() / rows.len() as f64;
    assert!(mean(&log[130..]) < 0.7 * mean(&log[..20]), "{} vs {}", mean(&log[130..]), mean(&log[..20]));
}

#[test]
fn curriculum_shifts_after_the_trigger() {
    let config = ExperimentConfig {
        schedule: ScheduleConfig { strategy: Strategy::SupThenUnsup, shift_after: Some(10), window: 10, ..Default::default() },
        ..tiny(30)
    };
    let log = train(&config).unwrap().log;
    assert!(log[..10].iter().all(|r| r.mode == Mode::Supervised && r.p_supervised == 1.0));
    assert_eq!(log[15].p_supervised, 0.5);
    assert!(log[20..].iter().all(|r| r.mode != Mode::Supervised && r.p_supervised == 0.0));

    let converging = ExperimentConfig {
        schedule: ScheduleConfig { strategy: Strategy::UnsupThenSup, patience: 1, window: 5, ..Default::default() },
        optimizer: symae::params::AdamConfig { learning_rate: 1e-12, ..Default::default() },
        ..tiny(60)
    };
    let log = train(&converging).unwrap().log;
    let first = log.iter().position(|r| r.p_supervised > 0.0).expect("the convergence trigger fired");
    assert!(first >= 20 && first % 10 == 1, "shift begins right after an evaluation point, got row {first}");
    assert!(log[..first].iter().all(|r| r.p_supervised == 0.0));
    assert_eq!(log[first + 4].p_supervised, 1.0);
}

#[test]
fn run_directory_is_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig { out: dir.path().join("run"), ..tiny(20) };
    let result = cmd_train(&config).unwrap();
    let out = &config.out;
    for f in ["config.toml", "corpus.tsv", "train_log.csv", "eval.csv", "checkpoint.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(ExperimentConfig::load(&out.join("config.toml")).unwrap(), config);
    let log = read_log(&out.join("train_log.csv")).unwrap();
    assert_eq!(log.len(), result.log.len());
    for (a, b) in log.iter().zip(&result.log) {
        assert_eq!((a.step, a.mode, a.l_xz, a.l_zxz), (b.step, b.mode, b.l_xz, b.l_zxz));
    }

    let (xz, zx) = result.last_reports().unwrap();
    assert_eq!(cmd_eval(&out.join("checkpoint.bin"), &out.join("corpus.tsv"), Side::X, 7).unwrap(), xz);
    assert_eq!(cmd_eval(&out.join("checkpoint.bin"), &out.join("corpus.tsv"), Side::Z, 64).unwrap(), zx);

    let loaded = SymbolicAutoencoder::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(loaded.config, result.trainer.sys.config);
    assert_eq!(loaded.store.numel(), result.trainer.sys.store.numel());
}

#[test]
fn eval_rejects_sequences_longer_than_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig { out: dir.path().join("run"), ..tiny(2) };
    cmd_train(&config).unwrap();
    let long = dir.path().join("long.tsv");
    fs::write(&long, "s0 s1 s2 s0 s1 s2 s0\ts0\n").unwrap();
    assert!(cmd_eval(&config.out.join("checkpoint.bin"), &long, Side::X, 8).is_err());
}

#[test]
fn generated_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskConfig::MiniPcfgSet { size: 60, depth: 2, grammar: Default::default() };
    let corpus = cmd_generate(&task, 9, Some(0.2), dir.path()).unwrap();
    let pairs = read_parallel(&dir.path().join("corpus.tsv")).unwrap();
    assert_eq!(pairs, corpus.to_text());
    assert_eq!(read_parallel(&dir.path().join("parallel.tsv")).unwrap().len(), 12);
    let xs = read_sequences(&dir.path().join("x_only.txt")).unwrap();
    let zs = read_sequences(&dir.path().join("z_only.txt")).unwrap();
    assert_eq!(xs.len() + zs.len(), 48);
    for (x, z) in &pairs {
        let words: Vec<&str> = x.iter().map(String::as_str).collect();
        assert_eq!(&symae::datasets::pcfg::interpret(&words).unwrap(), z);
    }

    let files = ExperimentConfig {
        task: TaskConfig::Files { corpus: dir.path().join("corpus.tsv") },
        ..tiny(3)
    };
    assert_eq!(train(&files).unwrap().corpus.pairs.len(), 60);
    let missing = ExperimentConfig { task: TaskConfig::Files { corpus: dir.path().join("nope.tsv") }, ..tiny(3) };
    assert!(missing.problems().iter().any(|p| p.contains("does not exist")));
}
