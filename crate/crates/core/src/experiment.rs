//! Experiment configuration and the generate/train/eval commands.
//!
//! A training run directory contains:
//!
//! - `config.toml`: the resolved configuration (re-running it reproduces the run)
//! - `corpus.tsv`: the evaluation corpus
//! - `train_log.csv`: one row per step
//! - `eval.csv`: one row per evaluation point and direction
//! - `checkpoint.bin`: final parameters with model config and vocabularies

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::DbVariant;
use crate::datasets::pcfg::{self, PcfgConfig};
use crate::datasets::{self, scan, split_corpus, ParallelCorpus, Splits, TextPair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::SymbolicAutoencoder;
use crate::params::AdamConfig;
use crate::training::{run_schedule, write_log, LogRow, Pools, RunOptions, ScheduleConfig, Trainer};
use crate::transducer::ModelConfig;
use crate::vocab::Side;

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskConfig {
    MiniScan {
        #[serde(default = "default_scan_size")]
        size: usize,
        #[serde(default)]
        full_grammar: bool,
    },
    MiniPcfgSet {
        #[serde(default = "default_pcfg_size")]
        size: usize,
        #[serde(default = "default_depth")]
        depth: usize,
        #[serde(default)]
        grammar: PcfgConfig,
    },
    /// Random sequences paired with themselves.
    Copy {
        #[serde(default = "default_copy_size")]
        size: usize,
        #[serde(default = "default_copy_symbols")]
        symbols: usize,
        #[serde(default = "default_one")]
        min_len: usize,
        #[serde(default = "default_copy_len")]
        max_len: usize,
    },
    /// A parallel `x<TAB>z` file.
    Files { corpus: PathBuf },
}

fn default_scan_size() -> usize {
    2000
}
fn default_pcfg_size() -> usize {
    2000
}
fn default_depth() -> usize {
    2
}
fn default_copy_size() -> usize {
    1000
}
fn default_copy_symbols() -> usize {
    4
}
fn default_one() -> usize {
    1
}
fn default_copy_len() -> usize {
    4
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::MiniScan { size: default_scan_size(), full_grammar: false }
    }
}

impl TaskConfig {
    /// Generates (or reads) the corpus.
    pub fn load(&self, seed: u64) -> Result<ParallelCorpus> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<TextPair> = match self {
            TaskConfig::MiniScan { size, full_grammar } => scan::generate(*size, *full_grammar, &mut rng),
            TaskConfig::MiniPcfgSet { size, depth, grammar } => pcfg::generate(*size, *depth, grammar, &mut rng)?,
            TaskConfig::Copy { size, symbols, min_len, max_len } => {
                let names: Vec<String> = (0..*symbols).map(|i| format!("s{i}")).collect();
                datasets::generate_copy(*size, &names, *min_len, *max_len, &mut rng)?
            }
            TaskConfig::Files { corpus } => datasets::read_parallel(corpus)?,
        };
        if pairs.is_empty() {
            return Err(Error::Config("the task produced no data".into()));
        }
        ParallelCorpus::from_text(&pairs)
    }
}

/// Model architecture; maximum lengths default to the longest corpus
/// sequence plus its EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// `default` (2 layers, d 64) or `six-layer`.
    pub preset: String,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub ff_dim: Option<usize>,
    pub max_x_len: Option<usize>,
    pub max_z_len: Option<usize>,
    pub temperature: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "default".into(),
            d_model: None,
            heads: None,
            layers: None,
            ff_dim: None,
            max_x_len: None,
            max_z_len: None,
            temperature: 1.0,
        }
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub eta: f64,
    pub db: DbVariant,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_batch_size: usize,
    /// Backpropagate through the expected halting mask.
    pub mask_feedback: bool,
    /// Stop once teacher-forced token accuracy reaches this value in both
    /// directions.
    pub stop_at_accuracy: Option<f64>,
    pub out: PathBuf,
    pub task: TaskConfig,
    pub model: ModelSection,
    pub optimizer: AdamConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            eta: 1.0,
            db: DbVariant::Softmax,
            steps: 20_000,
            batch_size: 32,
            eval_interval: 500,
            eval_batch_size: 256,
            mask_feedback: true,
            stop_at_accuracy: None,
            out: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            model: ModelSection::default(),
            optimizer: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// All validation failures, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.eta) {
            out.push(format!("eta {} is outside [0, 1]", self.eta));
        }
        if self.steps == 0 {
            out.push("steps must be positive".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            out.push("batch sizes must be positive".into());
        }
        if self.eval_interval == 0 {
            out.push("eval_interval must be positive".into());
        }
        if let TaskConfig::Files { corpus } = &self.task {
            if !corpus.exists() {
                out.push(format!("corpus file {} does not exist", corpus.display()));
            }
        }
        if !matches!(self.model.preset.as_str(), "default" | "six-layer") {
            out.push(format!("unknown model preset {:?} (default, six-layer)", self.model.preset));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            out.push("learning_rate must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Model configuration for `corpus`.
    pub fn model_config(&self, corpus: &ParallelCorpus) -> Result<ModelConfig> {
        let m = &self.model;
        let base = if m.preset == "six-layer" { ModelConfig::six_layer() } else { ModelConfig::default() };
        let config = ModelConfig {
            d_model: m.d_model.unwrap_or(base.d_model),
            heads: m.heads.unwrap_or(base.heads),
            layers: m.layers.unwrap_or(base.layers),
            ff_dim: m.ff_dim.unwrap_or(base.ff_dim),
            max_x_len: m.max_x_len.unwrap_or(corpus.max_len(Side::X) + 1),
            max_z_len: m.max_z_len.unwrap_or(corpus.max_len(Side::Z) + 1),
            db: self.db,
            temperature: m.temperature,
        };
        config.validate()?;
        for side in [Side::X, Side::Z] {
            if corpus.max_len(side) + 1 > config.max_len(side) {
                return Err(Error::Config(format!(
                    "max_{side}_len {} is shorter than the longest {side} sequence plus EOS ({})",
                    config.max_len(side),
                    corpus.max_len(side) + 1
                )));
            }
        }
        Ok(config)
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Writes `corpus.tsv`, `vocab.x`, `vocab.z` and, when `eta` is given, the
/// split files `parallel.tsv`, `x_only.txt`, `z_only.txt`.
pub fn cmd_generate(task: &TaskConfig, seed: u64, eta: Option<f64>, out: &Path) -> Result<ParallelCorpus> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let corpus = task.load(seed)?;
    datasets::write_parallel(&out.join("corpus.tsv"), &corpus.to_text())?;
    corpus.x_vocab.save(&out.join("vocab.x"))?;
    corpus.z_vocab.save(&out.join("vocab.z"))?;
    if let Some(eta) = eta {
        let splits = split_corpus(&corpus.pairs, eta, &mut rng_stream(seed, 1))?;
        let text = |v: &crate::vocab::Vocabulary, s: &[usize]| -> Vec<String> { s.iter().map(|&i| v.token(i).unwrap_or("").to_string()).collect() };
        let parallel: Vec<TextPair> = splits.parallel.iter().map(|(x, z)| (text(&corpus.x_vocab, x), text(&corpus.z_vocab, z))).collect();
        datasets::write_parallel(&out.join("parallel.tsv"), &parallel)?;
        let xs: Vec<_> = splits.x_only.iter().map(|x| text(&corpus.x_vocab, x)).collect();
        datasets::write_sequences(&out.join("x_only.txt"), &xs)?;
        let zs: Vec<_> = splits.z_only.iter().map(|z| text(&corpus.z_vocab, z)).collect();
        datasets::write_sequences(&out.join("z_only.txt"), &zs)?;
    }
    Ok(corpus)
}

/// One evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub report: EvalReport,
}

/// Everything a finished run produced.
pub struct RunResult {
    pub trainer: Trainer,
    pub corpus: ParallelCorpus,
    pub splits: Splits,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
}

impl RunResult {
    /// Reports of the last evaluation point, `(x -> z, z -> x)`.
    pub fn last_reports(&self) -> Option<(EvalReport, EvalReport)> {
        let n = self.evals.len();
        (n >= 2).then(|| (self.evals[n - 2].report, self.evals[n - 1].report))
    }
}

/// Trains in memory without touching the filesystem.
pub fn train(config: &ExperimentConfig) -> Result<RunResult> {
    train_with_progress(config, |_| {})
}

/// [`train`], calling `progress` with every evaluation row as it is made.
pub fn train_with_progress(config: &ExperimentConfig, mut progress: impl FnMut(&EvalRow)) -> Result<RunResult> {
    config.validate()?;
    let corpus = config.task.load(config.seed)?;
    let splits = split_corpus(&corpus.pairs, config.eta, &mut rng_stream(config.seed, 1))?;
    let model_config = config.model_config(&corpus)?;
    let sys = SymbolicAutoencoder::new(model_config, corpus.x_vocab.clone(), corpus.z_vocab.clone(), config.seed)?;
    let mut trainer = Trainer::new(sys, config.optimizer, config.seed.wrapping_add(3));
    trainer.feedback = config.mask_feedback;
    let mut pools = Pools::new(splits.clone());
    let schedule = config.schedule.build(&pools)?;
    let mut rng = rng_stream(config.seed, 2);
    let options = RunOptions { steps: config.steps, batch_size: config.batch_size, eval_interval: config.eval_interval };
    let mut evals = Vec::new();
    let log = run_schedule(&mut trainer, &mut pools, &schedule, &mut rng, options, |step, t| {
        let mut done = true;
        for side in [Side::X, Side::Z] {
            let report = evaluate(&t.sys, &corpus.pairs, side, config.eval_batch_size)?;
            done &= config.stop_at_accuracy.is_some_and(|a| report.teacher_forced_token.value() >= a);
            let row = EvalRow { step, report };
            progress(&row);
            evals.push(row);
        }
        Ok(!done)
    })?;
    Ok(RunResult { trainer, corpus, splits, log, evals })
}

pub fn write_evals(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["step"];
    header.extend(EvalReport::CSV_HEADER);
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut record = vec![r.step.to_string()];
        record.extend(r.report.csv_record());
        w.write_record(&record).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains and writes the run directory `config.out`.
pub fn cmd_train(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let out = &config.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let result = train(config)?;
    fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| Error::io(&out.join("config.toml"), e))?;
    datasets::write_parallel(&out.join("corpus.tsv"), &result.corpus.to_text())?;
    write_log(&out.join("train_log.csv"), &result.log)?;
    write_evals(&out.join("eval.csv"), &result.evals)?;
    result.trainer.sys.save(&out.join("checkpoint.bin"))?;
    Ok(result)
}

/// Evaluates a checkpoint on a parallel corpus file in one direction
/// (`source` is the input side).
pub fn cmd_eval(checkpoint: &Path, corpus: &Path, source: Side, batch_size: usize) -> Result<EvalReport> {
    let sys = SymbolicAutoencoder::load(checkpoint)?;
    let text = datasets::read_parallel(corpus)?;
    let corpus = ParallelCorpus::with_vocabs(&text, sys.x_vocab.clone(), sys.z_vocab.clone())
        .map_err(|e| Error::Config(format!("corpus does not match the checkpoint vocabularies: {e}")))?;
    for side in [Side::X, Side::Z] {
        if corpus.max_len(side) + 1 > sys.config.max_len(side) {
            return Err(Error::TooLong { length: corpus.max_len(side) + 1, max: sys.config.max_len(side) });
        }
    }
    evaluate(&sys, &corpus.pairs, source, batch_size)
}
