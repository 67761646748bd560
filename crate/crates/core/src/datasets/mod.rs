//! Synthetic corpora, supervision-ratio splits, and corpus files.
//!
//! Parallel files hold one `x<TAB>z` pair per line; unparallel files hold
//! one sequence per line. Tokens are whitespace separated on both sides.

pub mod pcfg;
pub mod scan;

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::{Side, Vocabulary};

pub type Pair = (Vec<usize>, Vec<usize>);
pub type TextPair = (Vec<String>, Vec<String>);

/// Aligned `(x, z)` sequences with both vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
    pub x_vocab: Vocabulary,
    pub z_vocab: Vocabulary,
}

impl ParallelCorpus {
    /// Builds both vocabularies from the data (tokens sorted).
    pub fn from_text(pairs: &[TextPair]) -> Result<Self> {
        let xs: BTreeSet<&str> = pairs.iter().flat_map(|p| p.0.iter().map(String::as_str)).collect();
        let zs: BTreeSet<&str> = pairs.iter().flat_map(|p| p.1.iter().map(String::as_str)).collect();
        Self::with_vocabs(pairs, Vocabulary::from_tokens(xs), Vocabulary::from_tokens(zs))
    }

    pub fn with_vocabs(pairs: &[TextPair], x_vocab: Vocabulary, z_vocab: Vocabulary) -> Result<Self> {
        let pairs = pairs
            .iter()
            .map(|(x, z)| Ok((x_vocab.encode_tokens(x)?, z_vocab.encode_tokens(z)?)))
            .collect::<Result<_>>()?;
        Ok(ParallelCorpus { pairs, x_vocab, z_vocab })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn vocab(&self, side: Side) -> &Vocabulary {
        match side {
            Side::X => &self.x_vocab,
            Side::Z => &self.z_vocab,
        }
    }

    /// Longest sequence on `side`, without EOS.
    pub fn max_len(&self, side: Side) -> usize {
        self.pairs
            .iter()
            .map(|(x, z)| match side {
                Side::X => x.len(),
                Side::Z => z.len(),
            })
            .max()
            .unwrap_or(0)
    }

    pub fn to_text(&self) -> Vec<TextPair> {
        let dec = |v: &Vocabulary, ids: &[usize]| ids.iter().map(|&i| v.token(i).unwrap_or("<unk>").to_string()).collect();
        self.pairs.iter().map(|(x, z)| (dec(&self.x_vocab, x), dec(&self.z_vocab, z))).collect()
    }
}

/// The three training pools.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub parallel: Vec<Pair>,
    pub x_only: Vec<Vec<usize>>,
    pub z_only: Vec<Vec<usize>>,
}

impl Splits {
    /// `|D_xz| / (|D_xz| + |D_x| + |D_z|)`.
    pub fn supervision_ratio(&self) -> f64 {
        let total = self.parallel.len() + self.x_only.len() + self.z_only.len();
        if total == 0 {
            return 0.0;
        }
        self.parallel.len() as f64 / total as f64
    }
}

/// `⌈eta * n⌉`, robust to the rounding of the product.
pub fn parallel_count(n: usize, eta: f64) -> usize {
    ((eta * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Randomly picks `⌈eta N⌉` pairs as parallel data and splits the rest into
/// two disjoint halves, keeping only the x side of the first and the z side
/// of the second.
pub fn split_corpus(pairs: &[Pair], eta: f64, rng: &mut impl Rng) -> Result<Splits> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let n_par = parallel_count(pairs.len(), eta).min(pairs.len());
    let rest = &order[n_par..];
    let half = rest.len() / 2;
    Ok(Splits {
        parallel: order[..n_par].iter().map(|&i| pairs[i].clone()).collect(),
        x_only: rest[..half].iter().map(|&i| pairs[i].0.clone()).collect(),
        z_only: rest[half..].iter().map(|&i| pairs[i].1.clone()).collect(),
    })
}

/// Distinct random sequences over `symbols` with lengths in
/// `min_len..=max_len`, each paired with itself.
pub fn generate_copy(size: usize, symbols: &[String], min_len: usize, max_len: usize, rng: &mut impl Rng) -> Result<Vec<TextPair>> {
    if symbols.is_empty() || min_len == 0 || min_len > max_len {
        return Err(Error::Config("copy task needs symbols and 1 <= min_len <= max_len".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..size.saturating_mul(50) {
        if out.len() == size {
            break;
        }
        let len = rng.gen_range(min_len..=max_len);
        let seq: Vec<String> = (0..len).map(|_| symbols.choose(rng).expect("symbols").clone()).collect();
        if seen.insert(seq.clone()) {
            out.push((seq.clone(), seq));
        }
    }
    Ok(out)
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

pub fn write_parallel(path: &Path, pairs: &[TextPair]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (x, z) in pairs {
        writeln!(w, "{}\t{}", x.join(" "), z.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_parallel(path: &Path) -> Result<Vec<TextPair>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (x, z) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected x<TAB>z", path.display(), n + 1)))?;
        out.push((tokens(x), tokens(z)));
    }
    Ok(out)
}

pub fn write_sequences(path: &Path, seqs: &[Vec<String>]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in seqs {
        writeln!(w, "{}", s.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sequences(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(tokens(&line));
        }
    }
    Ok(out)
}
