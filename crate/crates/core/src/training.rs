//! Supervised and reconstruction steps, mode schedules, and the training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::SequenceBatch;
use crate::bottleneck::DbVariant;
use crate::datasets::{Pair, Splits};
use crate::error::{Error, Result};
use crate::grad::{masked_nll, Graph, Var};
use crate::masking::{apply_hard_mask, apply_mask_feedback, effective_length, hard_masks};
use crate::model::SymbolicAutoencoder;
use crate::params::{Adam, AdamConfig, Binder};
use crate::transducer::Source;
use crate::vocab::{Side, EOS};

/// What a training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Teacher-forced NLL in both directions on parallel pairs.
    Supervised,
    /// `x -> z -> x` on x-only data.
    XRecon,
    /// `z -> x -> z` on z-only data.
    ZRecon,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Supervised, Mode::XRecon, Mode::ZRecon];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::XRecon => "x_recon",
            Mode::ZRecon => "z_recon",
        })
    }
}

/// Losses of one step; only those of the step's mode are present.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub l_xz: Option<f64>,
    pub l_zx: Option<f64>,
    pub l_xzx: Option<f64>,
    pub l_zxz: Option<f64>,
    /// Mean number of unmasked hidden positions (reconstruction only).
    pub effective_length: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl LossBundle {
    /// Sum of the present losses.
    pub fn total(&self) -> f64 {
        [self.l_xz, self.l_zx, self.l_xzx, self.l_zxz].iter().flatten().sum()
    }
}

/// Parameters, optimizer state and the noise stream.
pub struct Trainer {
    pub sys: SymbolicAutoencoder,
    pub optimizer: Adam,
    /// Gumbel noise source.
    pub noise: ChaCha8Rng,
    /// Whether reconstruction backpropagates through the expected mask.
    pub feedback: bool,
}

fn side_batch(seqs: &[Vec<usize>], side: Side) -> Result<SequenceBatch> {
    if seqs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(SequenceBatch::from_sequences(seqs, side))
}

fn target_nll<'g>(scores: Var<'g>, target: &SequenceBatch) -> Result<Var<'g>> {
    let (ids, weights) = target.targets();
    Ok(masked_nll(scores, &ids, &weights)?)
}

fn reborrow<'a>(noise: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    noise.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

impl Trainer {
    pub fn new(sys: SymbolicAutoencoder, adam: AdamConfig, seed: u64) -> Self {
        let optimizer = Adam::new(&sys.store, adam);
        Trainer { sys, optimizer, noise: ChaCha8Rng::seed_from_u64(seed), feedback: true }
    }

    /// Teacher-forced NLL in both directions, one joint update.
    pub fn supervised_step(&mut self, pairs: &[Pair]) -> Result<LossBundle> {
        let (xs, zs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let xb = side_batch(&xs, Side::X)?;
        let zb = side_batch(&zs, Side::Z)?;
        let sys = &mut self.sys;
        let mut noise = (sys.config.db == DbVariant::Gumbel).then_some(&mut self.noise as &mut dyn RngCore);
        let g = Graph::new();
        let (grads, l_xz, l_zx) = {
            let b = Binder::trainable(&g, &sys.store);
            let xz = sys.m_xz.forward_teacher_forced(&b, Source::Tokens(&xb), &zb, reborrow(&mut noise))?;
            let l_xz = target_nll(xz.scores, &zb)?;
            let zx = sys.m_zx.forward_teacher_forced(&b, Source::Tokens(&zb), &xb, reborrow(&mut noise))?;
            let l_zx = target_nll(zx.scores, &xb)?;
            (b.gradients(&g.backward(l_xz.add(l_zx))), l_xz.item(), l_zx.item())
        };
        let grad_norm = self.optimizer.step(&mut sys.store, &grads);
        Ok(LossBundle { l_xz: Some(l_xz), l_zx: Some(l_zx), grad_norm, ..Default::default() })
    }

    /// `y -> hidden -> y` for sequences on side `side`: the reader of `side`
    /// generates a quantized hidden sequence, the halting mask is applied,
    /// and the other model reconstructs `y` teacher-forced from it. Both
    /// models are updated by the one loss.
    pub fn reconstruction_step(&mut self, side: Side, seqs: &[Vec<usize>]) -> Result<LossBundle> {
        let yb = side_batch(seqs, side)?;
        let sys = &mut self.sys;
        let mut noise = (sys.config.db == DbVariant::Gumbel).then_some(&mut self.noise as &mut dyn RngCore);
        let g = Graph::new();
        let (grads, value, length) = {
            let b = Binder::trainable(&g, &sys.store);
            let generation = sys.reader(side).generate_quantized(&b, Source::Tokens(&yb), reborrow(&mut noise))?;
            let rows = generation.rows();
            let ids: Vec<usize> = (0..rows).flat_map(|r| generation.indices(r)).collect();
            let hard = hard_masks(&ids, rows, EOS);
            let hidden = if self.feedback {
                apply_mask_feedback(generation.quantized(), &hard, generation.eos_probabilities())?
            } else {
                apply_hard_mask(generation.quantized(), &hard)?
            };
            let out = sys.reader(side.other()).forward_teacher_forced(&b, Source::Embeddings(hidden), &yb, reborrow(&mut noise))?;
            let loss = target_nll(out.scores, &yb)?;
            (b.gradients(&g.backward(loss)), loss.item(), effective_length(&hard))
        };
        let grad_norm = self.optimizer.step(&mut sys.store, &grads);
        let mut bundle = LossBundle { effective_length: Some(length), grad_norm, ..Default::default() };
        match side {
            Side::X => bundle.l_xzx = Some(value),
            Side::Z => bundle.l_zxz = Some(value),
        }
        Ok(bundle)
    }

    pub fn x_reconstruction_step(&mut self, xs: &[Vec<usize>]) -> Result<LossBundle> {
        self.reconstruction_step(Side::X, xs)
    }

    pub fn z_reconstruction_step(&mut self, zs: &[Vec<usize>]) -> Result<LossBundle> {
        self.reconstruction_step(Side::Z, zs)
    }

    /// Runs one step of `mode` on a batch drawn from `data`.
    pub fn step(&mut self, mode: Mode, data: &mut Pools, batch_size: usize, rng: &mut impl Rng) -> Result<LossBundle> {
        match mode {
            Mode::Supervised => {
                let batch = data.parallel.next_batch(batch_size, rng);
                self.supervised_step(&batch)
            }
            Mode::XRecon => {
                let batch = data.x_only.next_batch(batch_size, rng);
                self.x_reconstruction_step(&batch)
            }
            Mode::ZRecon => {
                let batch = data.z_only.next_batch(batch_size, rng);
                self.z_reconstruction_step(&batch)
            }
        }
    }
}

/// Endless shuffled passes over a dataset.
#[derive(Debug, Clone)]
pub struct Pool<T> {
    items: Vec<T>,
    order: Vec<usize>,
    pos: usize,
}

impl<T: Clone> Pool<T> {
    pub fn new(items: Vec<T>) -> Self {
        Pool { order: Vec::new(), pos: 0, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Next `n` items (fewer only if the pool is smaller than `n`); the
    /// order is reshuffled at the start of every pass.
    pub fn next_batch(&mut self, n: usize, rng: &mut impl Rng) -> Vec<T> {
        let n = n.min(self.items.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = (0..self.items.len()).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.items[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

/// The three training pools.
#[derive(Debug, Clone)]
pub struct Pools {
    pub parallel: Pool<Pair>,
    pub x_only: Pool<Vec<usize>>,
    pub z_only: Pool<Vec<usize>>,
}

impl Pools {
    pub fn new(splits: Splits) -> Self {
        Pools { parallel: Pool::new(splits.parallel), x_only: Pool::new(splits.x_only), z_only: Pool::new(splits.z_only) }
    }

    pub fn size(&self, mode: Mode) -> usize {
        match mode {
            Mode::Supervised => self.parallel.len(),
            Mode::XRecon => self.x_only.len(),
            Mode::ZRecon => self.z_only.len(),
        }
    }
}

/// Probabilities of (supervised, x-reconstruction, z-reconstruction).
pub type ModeProbabilities = [f64; 3];

fn check_probabilities(p: &ModeProbabilities) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("mode probabilities {p:?} must be nonnegative and sum to 1")));
    }
    Ok(())
}

/// Draws a mode from `p`.
pub fn sample_mode(p: &ModeProbabilities, rng: &mut impl Rng) -> Mode {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for mode in Mode::ALL {
        acc += p[mode.index()];
        if u < acc {
            return mode;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last
    // mode with mass.
    *Mode::ALL.iter().rev().find(|m| p[m.index()] > 0.0).expect("probabilities sum to 1")
}

/// When the curriculum shift begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftTrigger {
    /// After this many steps.
    AtStep(usize),
    /// Once the mean training loss over an evaluation interval has not
    /// improved for this many consecutive intervals.
    Convergence(usize),
}

/// Mode probabilities over time: `start` until the shift begins, then a
/// linear move to `end` over `window` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub start: ModeProbabilities,
    pub end: ModeProbabilities,
    pub window: usize,
    pub trigger: ShiftTrigger,
}

impl Schedule {
    pub fn constant(p: ModeProbabilities) -> Result<Self> {
        Self::curriculum(p, p, 0, ShiftTrigger::AtStep(0))
    }

    pub fn curriculum(start: ModeProbabilities, end: ModeProbabilities, window: usize, trigger: ShiftTrigger) -> Result<Self> {
        check_probabilities(&start)?;
        check_probabilities(&end)?;
        Ok(Schedule { start, end, window, trigger })
    }

    /// Probabilities `steps_since_shift` steps after the shift began
    /// (`None` before it begins).
    pub fn probabilities(&self, steps_since_shift: Option<usize>) -> ModeProbabilities {
        let Some(t) = steps_since_shift else { return self.start };
        let alpha = if self.window == 0 { 1.0 } else { (t as f64 / self.window as f64).min(1.0) };
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = (1.0 - alpha) * self.start[i] + alpha * self.end[i];
        }
        p
    }

    /// Errors if a mode that can be drawn has no data.
    pub fn check_data(&self, pools: &Pools) -> Result<()> {
        for mode in Mode::ALL {
            let used = self.start[mode.index()] > 0.0 || self.end[mode.index()] > 0.0;
            if used && pools.size(mode) == 0 {
                return Err(Error::Config(format!("schedule draws {mode} steps but that dataset is empty")));
            }
        }
        Ok(())
    }
}

/// The three scheduling strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// All modes throughout.
    Joint,
    /// Reconstruction first, moving to supervised.
    UnsupThenSup,
    /// Supervised first, moving to reconstruction.
    SupThenUnsup,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Strategy::Joint),
            "unsup-then-sup" => Ok(Strategy::UnsupThenSup),
            "sup-then-unsup" => Ok(Strategy::SupThenUnsup),
            _ => Err(Error::Config(format!("unknown schedule {s:?} (joint, unsup-then-sup, sup-then-unsup)"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Joint => "joint",
            Strategy::UnsupThenSup => "unsup-then-sup",
            Strategy::SupThenUnsup => "sup-then-unsup",
        })
    }
}

/// Schedule settings as they appear in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub strategy: Strategy,
    /// Joint training draws modes in proportion to dataset sizes instead of
    /// uniformly over the modes that have data.
    pub proportional: bool,
    /// Start the shift after this many steps; when absent, start it once
    /// training has converged.
    pub shift_after: Option<usize>,
    /// Evaluation intervals without improvement that count as converged.
    pub patience: usize,
    /// Length of the linear shift in steps.
    pub window: usize,
    /// Fixed mode probabilities; overrides `strategy` when present.
    pub probabilities: Option<ModeProbabilities>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { strategy: Strategy::Joint, proportional: false, shift_after: None, patience: 10, window: 1000, probabilities: None }
    }
}

fn spread(modes: &[Mode], pools: &Pools, proportional: bool) -> Result<ModeProbabilities> {
    let weight = |m: Mode| if proportional { pools.size(m) as f64 } else if pools.size(m) > 0 { 1.0 } else { 0.0 };
    let total: f64 = modes.iter().map(|&m| weight(m)).sum();
    if total == 0.0 {
        let names: Vec<String> = modes.iter().map(Mode::to_string).collect();
        return Err(Error::Config(format!("no data for any of {}", names.join(", "))));
    }
    let mut p = [0.0; 3];
    for &m in modes {
        p[m.index()] = weight(m) / total;
    }
    Ok(p)
}

impl ScheduleConfig {
    pub fn build(&self, pools: &Pools) -> Result<Schedule> {
        let unsup = [Mode::XRecon, Mode::ZRecon];
        let trigger = match self.shift_after {
            Some(s) => ShiftTrigger::AtStep(s),
            None => ShiftTrigger::Convergence(self.patience),
        };
        let schedule = match (self.probabilities, self.strategy) {
            (Some(p), _) => Schedule::constant(p)?,
            (None, Strategy::Joint) => Schedule::constant(spread(&Mode::ALL, pools, self.proportional)?)?,
            (None, Strategy::UnsupThenSup) => Schedule::curriculum(spread(&unsup, pools, false)?, [1.0, 0.0, 0.0], self.window, trigger)?,
            (None, Strategy::SupThenUnsup) => Schedule::curriculum([1.0, 0.0, 0.0], spread(&unsup, pools, false)?, self.window, trigger)?,
        };
        schedule.check_data(pools)?;
        Ok(schedule)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub mode: Mode,
    pub l_xz: Option<f64>,
    pub l_zx: Option<f64>,
    pub l_xzx: Option<f64>,
    pub l_zxz: Option<f64>,
    pub effective_length: Option<f64>,
    pub p_supervised: f64,
    pub p_x_recon: f64,
    pub p_z_recon: f64,
    pub grad_norm: f64,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

pub fn write_log(path: &std::path::Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &std::path::Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))).collect()
}

/// Tracks the best interval loss for the convergence trigger.
#[derive(Debug, Clone)]
struct Convergence {
    patience: usize,
    best: f64,
    stale: usize,
}

impl Convergence {
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

/// Training loop settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// `on_eval` runs every this many steps (and after the last step).
    pub eval_interval: usize,
}

/// Runs `options.steps` steps, drawing each step's mode from the schedule.
/// `on_eval(step, trainer)` is called at every evaluation point and may stop
/// the run early by returning `Ok(false)`.
pub fn run_schedule(
    trainer: &mut Trainer,
    pools: &mut Pools,
    schedule: &Schedule,
    rng: &mut impl Rng,
    options: RunOptions,
    mut on_eval: impl FnMut(usize, &Trainer) -> Result<bool>,
) -> Result<Vec<LogRow>> {
    if options.steps == 0 || options.batch_size == 0 {
        return Err(Error::Config("steps and batch size must be positive".into()));
    }
    schedule.check_data(pools)?;
    let started = std::time::Instant::now();
    let interval = options.eval_interval.max(1);
    let mut shift_start = match schedule.trigger {
        ShiftTrigger::AtStep(s) => (s == 0).then_some(0),
        ShiftTrigger::Convergence(_) => None,
    };
    let mut convergence = match schedule.trigger {
        ShiftTrigger::Convergence(patience) => Some(Convergence { patience, best: f64::INFINITY, stale: 0 }),
        ShiftTrigger::AtStep(_) => None,
    };
    let (mut interval_loss, mut interval_steps) = (0.0, 0usize);
    let mut rows = Vec::with_capacity(options.steps);
    for step in 1..=options.steps {
        let p = schedule.probabilities(shift_start.map(|s| step - 1 - s));
        let mode = sample_mode(&p, rng);
        let losses = trainer.step(mode, pools, options.batch_size, rng)?;
        if !losses.total().is_finite() {
            return Err(Error::Config(format!("non-finite loss at step {step}")));
        }
        interval_loss += losses.total();
        interval_steps += 1;
        rows.push(LogRow {
            step,
            mode,
            l_xz: losses.l_xz,
            l_zx: losses.l_zx,
            l_xzx: losses.l_xzx,
            l_zxz: losses.l_zxz,
            effective_length: losses.effective_length,
            p_supervised: p[0],
            p_x_recon: p[1],
            p_z_recon: p[2],
            grad_norm: losses.grad_norm,
            wall_time: started.elapsed().as_secs_f64(),
        });
        if let ShiftTrigger::AtStep(s) = schedule.trigger {
            if shift_start.is_none() && step == s {
                shift_start = Some(step);
            }
        }
        if step % interval == 0 || step == options.steps {
            if let (Some(c), None) = (convergence.as_mut(), shift_start) {
                if c.observe(interval_loss / interval_steps as f64) {
                    shift_start = Some(step);
                }
            }
            interval_loss = 0.0;
            interval_steps = 0;
            if !on_eval(step, trainer)? {
                break;
            }
        }
    }
    Ok(rows)
}
