use std::collections::HashMap;

use crate::error::{data_err, Result};
use crate::model::{EOS, PAD, RESERVED, SOS, UNK};

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Lowercase, strip punctuation, split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Dense token table with the four reserved entries first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl Vocab {
    /// Words of `captions` in order of first occurrence.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Vocab::default();
        let mut any = false;
        for c in captions {
            any = true;
            for w in normalize_words(c) {
                v.push(w);
            }
        }
        if !any {
            return Err(data_err!("cannot build a vocabulary from zero captions"));
        }
        Ok(v)
    }

    fn push(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.tokens.len());
            self.tokens.push(w);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        normalize_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins word tokens with single spaces, skipping `<pad>`, `<sos>` and `<eos>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != SOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Space-separated non-reserved words, for storage in a checkpoint.
    pub fn to_line(&self) -> String {
        self.tokens[RESERVED..].join(" ")
    }

    pub fn from_line(line: &str) -> Self {
        let mut v = Vocab::default();
        for w in line.split_whitespace() {
            v.push(w.to_string());
        }
        v
    }
}
