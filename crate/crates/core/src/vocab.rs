//! Token vocabularies with the three reserved ids.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Which side of the transduction a sequence or vocabulary belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Side {
    X,
    Z,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::X => Side::Z,
            Side::Z => Side::X,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::X => "x",
            Side::Z => "z",
        })
    }
}

/// Special token indices of a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
}

impl Default for Specials {
    fn default() -> Self {
        Specials { pad: PAD, bos: BOS, eos: EOS }
    }
}

/// Bidirectional token/index map. Ids 0..3 are PAD, BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for t in [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN] {
            v.insert(t);
        }
        v
    }

    /// Vocabulary holding the reserved tokens followed by `tokens` in order
    /// (duplicates ignored).
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        Specials::default()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of whitespace-separated `text`; unknown tokens are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
            .collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).ok_or_else(|| Error::UnknownToken(t.as_ref().to_string())))
            .collect()
    }

    /// Space-joined tokens of `ids`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    /// One token per line, line number = id.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            tokens.push(line.to_string());
        }
        let expected = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN];
        if tokens.len() < 3 || tokens[..3] != expected {
            return Err(Error::Format("vocabulary must start with <pad>, <bos>, <eos>".into()));
        }
        let mut v = Self::new();
        for t in &tokens[3..] {
            if v.id(t).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
