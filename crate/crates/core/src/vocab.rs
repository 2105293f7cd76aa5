//! Token vocabulary with fixed special ids.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VocabError {
    #[error("empty token in corpus")]
    EmptyToken,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("id {0} is not in the vocabulary")]
    UnknownId(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every corpus token in lexicographic order.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut words = BTreeSet::new();
        for caption in corpus {
            for t in caption {
                let t = t.as_ref();
                if t.is_empty() {
                    return Err(VocabError::EmptyToken);
                }
                if !SPECIALS.contains(&t) {
                    words.insert(t.to_string());
                }
            }
        }
        Ok(Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect()))
    }

    /// Rebuilds from a stored token list (index = id).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps unknown words to `[UNK]`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn encode_strict<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>, VocabError> {
        words
            .iter()
            .map(|w| self.id(w.as_ref()).ok_or_else(|| VocabError::OutOfVocabulary(w.as_ref().to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, VocabError> {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string).ok_or(VocabError::UnknownId(i)))
            .collect()
    }

    /// Decodes and drops special tokens.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }
}

/// Lowercase whitespace tokenisation used by captions and metrics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}
