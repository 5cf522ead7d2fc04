//! Whitespace word-level tokenizer over the closed synthetic vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;
pub const SEP: usize = 5;

pub const SPECIALS: [&str; 6] = ["[PAD]", "[CLS]", "[BOS]", "[EOS]", "[UNK]", "[SEP]"];

/// Surface form of the sentence separator in rendered report text.
pub const SEP_WORD: &str = ".";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Id-ordered tokens: the specials, then words sorted.
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Tokenizer {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                if w != SEP_WORD && !SPECIALS.contains(&w) {
                    words.insert(w.to_string());
                }
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("well-formed vocabulary")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Tokenizer> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::Format("duplicate vocabulary entry".into()));
        }
        Ok(Tokenizer { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| {
                if w == SEP_WORD {
                    SEP
                } else {
                    self.id(w).unwrap_or(UNK)
                }
            })
            .collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize); PAD, CLS, BOS and EOS are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | CLS | BOS | EOS => {}
                SEP => words.push(SEP_WORD),
                id => words.push(self.tokens.get(id).map_or("[UNK]", String::as_str)),
            }
        }
        words.join(" ")
    }

    pub fn marker_ids(&self, marker_words: &BTreeSet<&str>) -> BTreeSet<usize> {
        marker_words.iter().filter_map(|w| self.id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_words_are_sorted() {
        let t = Tokenizer::build(["b a", "c a"]);
        assert_eq!(t.tokens()[6..], ["a", "b", "c"]);
        assert_eq!(t.id("a"), Some(6));
    }

    #[test]
    fn empty_text_and_unknowns() {
        let t = Tokenizer::build(["x y"]);
        assert!(t.tokenize("").is_empty());
        assert_eq!(t.tokenize("x z"), vec![6, UNK]);
    }

    #[test]
    fn round_trip_with_separator() {
        let t = Tokenizer::build(["pigmentation is sparse", "the patient reports itching"]);
        let s = "pigmentation is sparse . the patient reports itching";
        let mut ids = vec![CLS];
        ids.extend(t.tokenize(s));
        ids.push(EOS);
        assert_eq!(t.detokenize(&ids), s);
    }

    #[test]
    fn rejects_bad_vocab() {
        assert!(Tokenizer::from_tokens(vec!["a".into()]).is_err());
    }
}
