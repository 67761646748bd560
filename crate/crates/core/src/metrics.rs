//! Token and sentence accuracy in the teacher-forced, autoregressive and
//! reconstruction regimes.
//!
//! Scored sequences include their EOS. A prediction that never terminated is
//! scored without one, so it can never match a gold sequence exactly.

use std::fmt;

use crate::batch::SequenceBatch;
use crate::datasets::Pair;
use crate::error::{Error, Result};
use crate::grad::Graph;
use crate::model::SymbolicAutoencoder;
use crate::params::Binder;
use crate::transducer::Source;
use crate::vocab::{Side, EOS};

/// `correct / total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ratio {
    pub correct: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: Ratio) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ({}/{})", self.value(), self.correct, self.total)
    }
}

fn check_aligned(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(format!("{} predictions for {} gold sequences", preds.len(), golds.len())));
    }
    if golds.iter().all(Vec::is_empty) {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Position-wise match rate. Each pair contributes `max(|pred|, |gold|)`
/// positions: missing predictions and surplus predictions both count as
/// wrong.
pub fn token_accuracy(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<Ratio> {
    check_aligned(preds, golds)?;
    let mut r = Ratio::default();
    for (p, g) in preds.iter().zip(golds) {
        r.total += p.len().max(g.len());
        r.correct += p.iter().zip(g).filter(|(a, b)| a == b).count();
    }
    Ok(r)
}

/// Fraction of exactly reproduced sequences.
pub fn sentence_accuracy(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<Ratio> {
    check_aligned(preds, golds)?;
    Ok(Ratio { correct: preds.iter().zip(golds).filter(|(p, g)| p == g).count(), total: golds.len() })
}

fn with_eos(seq: &[usize]) -> Vec<usize> {
    let mut s = seq.to_vec();
    s.push(EOS);
    s
}

/// Teacher-forced argmax predictions at every gold position (EOS included).
pub fn teacher_forced_predictions(sys: &SymbolicAutoencoder, source: Side, sources: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let model = sys.reader(source);
    let g = Graph::new();
    let b = Binder::frozen(&g, &sys.store);
    let src = SequenceBatch::from_sequences(sources, source);
    let tgt = SequenceBatch::from_sequences(targets, source.other());
    let out = model.forward_teacher_forced(&b, Source::Tokens(&src), &tgt, None)?;
    let steps = tgt.target_steps();
    Ok(targets.iter().enumerate().map(|(r, t)| out.indices[r * steps..r * steps + t.len() + 1].to_vec()).collect())
}

/// Greedy autoregressive outputs, EOS appended when produced.
pub fn greedy_predictions(sys: &SymbolicAutoencoder, source: Side, sources: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let g = Graph::new();
    let b = Binder::frozen(&g, &sys.store);
    let src = SequenceBatch::from_sequences(sources, source);
    let decoded = sys.reader(source).generate_tokens(&b, Source::Tokens(&src))?;
    Ok(decoded.iter().map(|d| d.scored()).collect())
}

/// Round trip `y -> ŵ -> ŷ` where `y` is on side `side`: the hidden
/// sequence `ŵ` is fed to the second model exactly as generated (with its
/// EOS if it produced one). Returns the scored `ŷ` sequences.
pub fn reconstructions(sys: &SymbolicAutoencoder, side: Side, seqs: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let hidden = greedy_predictions(sys, side, seqs)?;
    let g = Graph::new();
    let b = Binder::frozen(&g, &sys.store);
    let back = sys.reader(side.other());
    let emb = back.embed_raw(&b, &hidden)?;
    let decoded = back.generate_tokens(&b, Source::Embeddings(emb))?;
    Ok(decoded.iter().map(|d| d.scored()).collect())
}

/// Token and sentence accuracy of the round trip `y -> ŵ -> ŷ`.
pub fn reconstruction_accuracy(sys: &SymbolicAutoencoder, side: Side, seqs: &[Vec<usize>]) -> Result<(Ratio, Ratio)> {
    let preds = reconstructions(sys, side, seqs)?;
    let golds: Vec<_> = seqs.iter().map(|s| with_eos(s)).collect();
    Ok((token_accuracy(&preds, &golds)?, sentence_accuracy(&preds, &golds)?))
}

/// All metrics for one direction `source -> source.other()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalReport {
    pub source: Side,
    pub teacher_forced_token: Ratio,
    pub autoregressive_token: Ratio,
    pub sentence: Ratio,
    /// Round trip of the target sequences through the other model.
    pub reconstruction_token: Ratio,
    pub reconstruction_sentence: Ratio,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 16] = [
        "direction",
        "tf_token_acc",
        "tf_token_correct",
        "tf_token_total",
        "ar_token_acc",
        "ar_token_correct",
        "ar_token_total",
        "sentence_acc",
        "sentence_correct",
        "sentence_total",
        "recon_token_acc",
        "recon_token_correct",
        "recon_token_total",
        "recon_sentence_acc",
        "recon_sentence_correct",
        "recon_sentence_total",
    ];

    pub fn direction(&self) -> String {
        format!("{}{}", self.source, self.source.other())
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut row = vec![self.direction()];
        for r in [self.teacher_forced_token, self.autoregressive_token, self.sentence, self.reconstruction_token, self.reconstruction_sentence] {
            row.extend([format!("{}", r.value()), r.correct.to_string(), r.total.to_string()]);
        }
        row
    }

    /// Header line and one data line.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory write");
        w.write_record(self.csv_record()).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "direction {} -> {}", self.source, self.source.other())?;
        writeln!(f, "  token accuracy (teacher-forced)   {}", self.teacher_forced_token)?;
        writeln!(f, "  token accuracy (autoregressive)   {}", self.autoregressive_token)?;
        writeln!(f, "  sentence accuracy                 {}", self.sentence)?;
        writeln!(f, "  reconstruction token accuracy     {}", self.reconstruction_token)?;
        write!(f, "  reconstruction sentence accuracy  {}", self.reconstruction_sentence)
    }
}

/// Evaluates `source -> target` on `pairs` (given as `(x, z)`), in batches.
pub fn evaluate(sys: &SymbolicAutoencoder, pairs: &[Pair], source: Side, batch_size: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut report = EvalReport {
        source,
        teacher_forced_token: Ratio::default(),
        autoregressive_token: Ratio::default(),
        sentence: Ratio::default(),
        reconstruction_token: Ratio::default(),
        reconstruction_sentence: Ratio::default(),
    };
    for chunk in pairs.chunks(batch_size.max(1)) {
        let (srcs, tgts): (Vec<_>, Vec<_>) = chunk
            .iter()
            .map(|(x, z)| match source {
                Side::X => (x.clone(), z.clone()),
                Side::Z => (z.clone(), x.clone()),
            })
            .unzip();
        let golds: Vec<_> = tgts.iter().map(|t| with_eos(t)).collect();
        let tf = teacher_forced_predictions(sys, source, &srcs, &tgts)?;
        report.teacher_forced_token.add(token_accuracy(&tf, &golds)?);
        let ar = greedy_predictions(sys, source, &srcs)?;
        report.autoregressive_token.add(token_accuracy(&ar, &golds)?);
        report.sentence.add(sentence_accuracy(&ar, &golds)?);
        let (rt, rs) = reconstruction_accuracy(sys, source.other(), &tgts)?;
        report.reconstruction_token.add(rt);
        report.reconstruction_sentence.add(rs);
    }
    Ok(report)
}
