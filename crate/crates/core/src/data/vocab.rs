//! Closed word-level vocabulary of the synthetic task grammar.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{CromeError, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";

const WORDS: &[&str] = &[
    PAD, EOS, ".", "?", ",",
    "red", "green", "blue", "yellow",
    "square", "circle", "triangle",
    "squares", "circles", "triangles",
    "zero", "one", "two", "three", "four",
    "how", "many", "what", "color", "shape", "is", "the", "shapes", "are", "there",
    "describe", "image", "a", "and", "empty",
    // used only by the held-out position task and the text-only corpus
    "where", "topleft", "topright", "bottomleft", "bottomright",
];

/// Words that never occur in pretraining or instruction data; only the
/// held-out fine-tuning task uses them.
pub const HELD_OUT_WORDS: &[&str] = &["where", "topleft", "topright", "bottomleft", "bottomright"];

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Vocab {
    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let words = WORDS.to_vec();
            let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
            Vocab { words, index }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| CromeError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&'static str> {
        self.words
            .get(id)
            .copied()
            .ok_or_else(|| CromeError::Data(format!("token id {id} outside vocabulary of {}", self.len())))
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn held_out_ids(&self) -> Vec<usize> {
        HELD_OUT_WORDS.iter().map(|w| self.index[w]).collect()
    }

    pub fn words(&self) -> &[&'static str] {
        &self.words
    }
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    Vocab::standard().tokenize(text)
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    Vocab::standard().detokenize(ids)
}
