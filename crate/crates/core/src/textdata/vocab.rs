use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token ↔ index map. Index 0 is padding, 1 is unknown; the rest follow first
/// occurrence in the corpus the vocabulary was built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn empty() -> Self {
        let mut v = Vocabulary {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        v.push(PAD_TOKEN);
        v.push(UNK_TOKEN);
        v
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Vocabulary over an explicit token list (reserved entries are prepended).
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self::empty();
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or [`UNK`].
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    /// One token per line; the line number is the index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
            return Err(Error::format(
                path.display().to_string(),
                1,
                "vocabulary must start with <pad> and <unk>",
            ));
        }
        let v = Self::from_tokens(&lines[2..]);
        if v.len() != lines.len() {
            return Err(Error::format(
                path.display().to_string(),
                0,
                "duplicate tokens in vocabulary file",
            ));
        }
        Ok(v)
    }
}

/// Builds a vocabulary of every token seen at least `min_count` times.
pub fn build_vocab<I, S>(corpus: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator,
    I::Item: AsRef<[S]>,
    S: AsRef<str>,
{
    if min_count == 0 {
        return Err(Error::arg("min_count must be at least 1"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut seen_any = false;
    for seq in corpus {
        seen_any = true;
        for tok in seq.as_ref() {
            let tok = tok.as_ref();
            let c = counts.entry(tok.to_string()).or_insert(0);
            if *c == 0 {
                order.push(tok.to_string());
            }
            *c += 1;
        }
    }
    if !seen_any || order.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    Ok(Vocabulary::from_tokens(
        order
            .into_iter()
            .filter(|t| counts[t] >= min_count && t != PAD_TOKEN && t != UNK_TOKEN),
    ))
}
