use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::kg::KnowledgeGraph;
use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
/// Number of reserved ids; corpus tokens start here.
pub const RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Word-level vocabulary with the reserved ids `PAD=0, UNK=1, CLS=2, SEP=3, MASK=4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Lowercased words split at whitespace and punctuation; the delimiters are dropped.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocabulary {
    /// Keeps words seen at least `min_freq` times, ordered by frequency (descending)
    /// then lexicographically.
    pub fn from_corpus<'a, I>(texts: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".to_string()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in split_words(text) {
                *counts.entry(word).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !RESERVED_TOKENS.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(
            RESERVED_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(w, _)| w))
                .collect(),
        ))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .map(|w| self.id(&w).unwrap_or(UNK))
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED || tokens[..RESERVED] != RESERVED_TOKENS {
            return Err(Error::Config(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Vocabulary over entity names, descriptions and relation texts of `kg`.
pub fn build_vocab(kg: &KnowledgeGraph, min_freq: usize) -> Result<Vocabulary> {
    let texts = kg
        .entities
        .iter()
        .flat_map(|e| [e.name.as_str(), e.description.as_str()])
        .chain(kg.relations.iter().map(|r| r.text.as_str()));
    Vocabulary::from_corpus(texts, min_freq)
}

/// Convenience wrapper: token ids for `text`, OOV words as `UNK`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    vocab.tokenize(text)
}
