//! Closed-vocabulary whitespace tokenizer.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CLS: usize = 3;
pub const NUM_SPECIAL: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[BOS]", "[EOS]", "[CLS]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Special tokens take ids 0..4; `words` follow in order. Duplicates are ignored.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut t = Tokenizer {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in SPECIAL_TOKENS.iter().map(|s| s.to_string()) {
            t.push(w);
        }
        for w in words {
            t.push(w.as_ref().to_string());
        }
        t
    }

    fn push(&mut self, w: String) {
        if !self.ids.contains_key(&w) {
            self.ids.insert(w.clone(), self.words.len());
            self.words.push(w);
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Inverse of [`Tokenizer::tokenize`]; special ids are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= NUM_SPECIAL)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `[BOS] words [EOS] [CLS]`, unpadded.
    pub fn frame(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(text)?);
        ids.extend([EOS, CLS]);
        Ok(ids)
    }

    /// One token per line; line number is the id.
    pub fn to_vocab_file(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_vocab_file(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIAL || lines[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Format("vocabulary must start with the reserved tokens".into()));
        }
        let t = Tokenizer::new(&lines[NUM_SPECIAL..]);
        if t.vocab_size() != lines.len() {
            return Err(Error::Format("vocabulary contains duplicate tokens".into()));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_vocab_file(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(["patch", "moves", "left"])
    }

    #[test]
    fn round_trip_and_empty() {
        let t = tok();
        let ids = t.tokenize("patch moves left").unwrap();
        assert_eq!(ids, vec![4, 5, 6]);
        assert_eq!(t.detokenize(&ids), "patch moves left");
        assert!(t.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn unknown_word_is_named() {
        let err = tok().tokenize("patch moves up").unwrap_err();
        assert!(err.to_string().contains("`up`"));
    }

    #[test]
    fn framing_ends_with_eos_cls() {
        let ids = tok().frame("moves left").unwrap();
        assert_eq!(ids, vec![BOS, 5, 6, EOS, CLS]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let t = tok();
        let back = Tokenizer::from_vocab_file(&t.to_vocab_file()).unwrap();
        assert_eq!(back, t);
        assert!(Tokenizer::from_vocab_file("a\nb\n").is_err());
    }
}
