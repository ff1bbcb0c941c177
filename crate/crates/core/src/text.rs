//! Word-level vocabulary. Prompts are whitespace-separated words; each word
//! maps to one token id.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from words in order, dropping repeats.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            vocab.insert(w.into());
        }
        vocab
    }

    pub fn insert(&mut self, word: String) -> usize {
        if let Some(&id) = self.index.get(&word) {
            return id;
        }
        let id = self.words.len();
        self.index.insert(word.clone(), id);
        self.words.push(word);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
            .collect()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Vocab::new(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_round_trip() {
        let v = Vocab::new(["a", "red", "square", "and", "a"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.tokenize("a red square").unwrap(), vec![0, 1, 2]);
        assert!(matches!(v.tokenize("a blue square"), Err(Error::UnknownWord(w)) if w == "blue"));
    }
}
