//! Prefix string-function expressions and their evaluation.
//!
//! An expression is either a run of symbols or a function name followed by
//! its arguments; the two arguments of a binary function are separated by
//! `,`, e.g. `append reverse A B , C` evaluates to `B A C`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEPARATOR: &str = ",";

pub const UNARY: [&str; 6] = ["copy", "reverse", "shift", "echo", "swap_first_last", "repeat"];
pub const BINARY: [&str; 4] = ["append", "prepend", "remove_first", "remove_second"];

fn arity(word: &str) -> Option<usize> {
    if UNARY.contains(&word) {
        Some(1)
    } else if BINARY.contains(&word) {
        Some(2)
    } else {
        None
    }
}

fn apply_unary(f: &str, mut x: Vec<String>) -> Vec<String> {
    match f {
        "copy" => x,
        "reverse" => {
            x.reverse();
            x
        }
        "shift" => {
            if !x.is_empty() {
                x.rotate_left(1);
            }
            x
        }
        "echo" => {
            if let Some(last) = x.last().cloned() {
                x.push(last);
            }
            x
        }
        "swap_first_last" => {
            if let Some(n) = x.len().checked_sub(1) {
                x.swap(0, n);
            }
            x
        }
        "repeat" => [x.clone(), x].concat(),
        _ => unreachable!("unknown unary function {f}"),
    }
}

fn apply_binary(f: &str, mut a: Vec<String>, b: Vec<String>) -> Vec<String> {
    match f {
        "append" => {
            a.extend(b);
            a
        }
        "prepend" => b.into_iter().chain(a).collect(),
        "remove_first" => b,
        "remove_second" => a,
        _ => unreachable!("unknown binary function {f}"),
    }
}

struct Parser<'a> {
    words: &'a [&'a str],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, what: &str) -> Error {
        Error::Format(format!("{what} at word {} of {:?}", self.pos, self.words.join(" ")))
    }

    fn expr(&mut self) -> Result<Vec<String>> {
        let word = *self.words.get(self.pos).ok_or_else(|| self.error("expected an expression"))?;
        match arity(word) {
            Some(1) => {
                self.pos += 1;
                Ok(apply_unary(word, self.expr()?))
            }
            Some(_) => {
                self.pos += 1;
                let a = self.expr()?;
                if self.words.get(self.pos) != Some(&SEPARATOR) {
                    return Err(self.error("expected ','"));
                }
                self.pos += 1;
                let b = self.expr()?;
                Ok(apply_binary(word, a, b))
            }
            None => {
                let start = self.pos;
                while self.pos < self.words.len() && self.words[self.pos] != SEPARATOR && arity(self.words[self.pos]).is_none() {
                    self.pos += 1;
                }
                if self.pos == start {
                    return Err(self.error("expected a symbol"));
                }
                Ok(self.words[start..self.pos].iter().map(|s| s.to_string()).collect())
            }
        }
    }
}

/// Evaluates an expression.
pub fn interpret(words: &[&str]) -> Result<Vec<String>> {
    let mut p = Parser { words, pos: 0 };
    let out = p.expr()?;
    if p.pos != words.len() {
        return Err(p.error("trailing words"));
    }
    Ok(out)
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcfgConfig {
    /// Symbols are a letter from the first `letters` of `A..Z` followed by a
    /// number in `1..=numbers`.
    pub letters: usize,
    pub numbers: usize,
    /// Longest run of symbols at a leaf.
    pub max_leaf_len: usize,
    /// Probability of stopping at a leaf before the depth bound.
    pub leaf_probability: f64,
    pub functions: Vec<String>,
}

impl Default for PcfgConfig {
    fn default() -> Self {
        PcfgConfig {
            letters: 6,
            numbers: 2,
            max_leaf_len: 3,
            leaf_probability: 0.3,
            functions: ["echo", "append", "copy", "reverse"].map(String::from).to_vec(),
        }
    }
}

impl PcfgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.letters == 0 || self.letters > 26 || self.numbers == 0 || self.max_leaf_len == 0 {
            return Err(Error::Config("pcfg symbol inventory is empty".into()));
        }
        if self.functions.is_empty() {
            return Err(Error::Config("pcfg function list is empty".into()));
        }
        if let Some(f) = self.functions.iter().find(|f| arity(f).is_none()) {
            return Err(Error::Config(format!("unknown pcfg function {f:?}")));
        }
        if !(0.0..=1.0).contains(&self.leaf_probability) {
            return Err(Error::Config("leaf_probability outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn symbols(&self) -> Vec<String> {
        (0..self.letters)
            .flat_map(|l| (1..=self.numbers).map(move |n| format!("{}{n}", (b'A' + l as u8) as char)))
            .collect()
    }

    fn random_expr(&self, depth: usize, symbols: &[String], rng: &mut impl Rng, out: &mut Vec<String>) {
        if depth == 0 || rng.gen_bool(self.leaf_probability) {
            let len = rng.gen_range(1..=self.max_leaf_len);
            out.extend((0..len).map(|_| symbols.choose(rng).expect("symbols").clone()));
            return;
        }
        let f = self.functions.choose(rng).expect("functions");
        out.push(f.clone());
        self.random_expr(depth - 1, symbols, rng, out);
        if arity(f) == Some(2) {
            out.push(SEPARATOR.to_string());
            self.random_expr(depth - 1, symbols, rng, out);
        }
    }
}

/// Up to `size` distinct expressions of nesting depth at most `depth`,
/// paired with their values. Gives up after `50 * size` draws.
pub fn generate(size: usize, depth: usize, config: &PcfgConfig, rng: &mut impl Rng) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    config.validate()?;
    let symbols = config.symbols();
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for _ in 0..size.saturating_mul(50) {
        if pairs.len() == size {
            break;
        }
        let mut x = Vec::new();
        config.random_expr(depth, &symbols, rng, &mut x);
        if seen.insert(x.clone()) {
            let words: Vec<&str> = x.iter().map(String::as_str).collect();
            let z = interpret(&words)?;
            pairs.push((x, z));
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(e: &str) -> String {
        interpret(&e.split_whitespace().collect::<Vec<_>>()).unwrap().join(" ")
    }

    #[test]
    fn interpreter_examples() {
        assert_eq!(run("echo append append E18 C13 , L18 M17 , R1 L1 Y1 T18 J18"), "E18 C13 L18 M17 R1 L1 Y1 T18 J18 J18");
        assert_eq!(run("copy A B"), "A B");
        assert_eq!(run("reverse A B C"), "C B A");
        assert_eq!(run("shift A B C"), "B C A");
        assert_eq!(run("swap_first_last A B C"), "C B A");
        assert_eq!(run("repeat A B"), "A B A B");
        assert_eq!(run("prepend A , B C"), "B C A");
        assert_eq!(run("remove_first A , B"), "B");
        assert_eq!(run("remove_second A , B"), "A");
        assert_eq!(run("append reverse A B , C"), "B A C");
        assert_eq!(run("append A , reverse B C"), "A C B");
    }

    #[test]
    fn malformed_expressions() {
        for e in ["", "append A B", "reverse", "A , B", "append A ,"] {
            let words: Vec<&str> = e.split_whitespace().collect();
            assert!(interpret(&words).is_err(), "{e:?}");
        }
    }

    #[test]
    fn generator_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = PcfgConfig::default();
        let pairs = generate(300, 2, &config, &mut rng).unwrap();
        assert_eq!(pairs.len(), 300);
        for (x, z) in &pairs {
            let words: Vec<&str> = x.iter().map(String::as_str).collect();
            assert_eq!(&interpret(&words).unwrap(), z);
            assert!(z.iter().all(|s| config.symbols().contains(s)));
        }
        let bad = PcfgConfig { functions: vec!["explode".into()], ..Default::default() };
        assert!(generate(1, 1, &bad, &mut rng).is_err());
    }
}
