// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed whitespace-level vocabulary and the masked cloze query type.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{KnError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const MASK: TokenId = 3;
pub const UNK: TokenId = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Bidirectional word ↔ id table. Ids `0..5` are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            v.insert(s);
        }
        v
    }

    /// Returns the id of `word`, adding it if absent.
    pub fn insert(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as TokenId;
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    /// Splits on whitespace; every word must already be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| KnError::Index(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A tokenized sentence with exactly one masked position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeQuery {
    pub tokens: Vec<TokenId>,
    pub mask_pos: usize,
    /// Token that should fill the mask.
    pub answer: TokenId,
    /// Index of the source fact in the world's fact list.
    pub fact: usize,
    /// Index of the source template in the world's template list.
    pub template: usize,
}

impl ClozeQuery {
    /// Checks the single-mask invariant and token ranges.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let masks = self.tokens.iter().filter(|&&t| t == MASK).count();
        if masks != 1 {
            return Err(KnError::Query(format!(
                "query must contain exactly one mask token, found {masks}"
            )));
        }
        if self.tokens.get(self.mask_pos) != Some(&MASK) {
            return Err(KnError::Query(format!(
                "mask position {} does not hold the mask token",
                self.mask_pos
            )));
        }
        if let Some(&bad) = self
            .tokens
            .iter()
            .chain(std::iter::once(&self.answer))
            .find(|&&t| t as usize >= vocab_size)
        {
            return Err(KnError::Index(format!(
                "token {bad} out of range for vocab {vocab_size}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocab::new();
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn encode_rejects_unknown_words() {
        let mut v = Vocab::new();
        v.insert("hello");
        assert_eq!(v.encode("hello [MASK]").unwrap(), vec![5, MASK]);
        assert!(v.encode("hello world").is_err());
    }

    #[test]
    fn query_mask_validation() {
        let q = |tokens: Vec<TokenId>, mask_pos| ClozeQuery {
            tokens,
            mask_pos,
            answer: 5,
            fact: 0,
            template: 0,
        };
        assert!(q(vec![CLS, 5, MASK, SEP], 2).validate(10).is_ok());
        assert!(matches!(
            q(vec![CLS, 5, SEP], 1).validate(10),
            Err(KnError::Query(_))
        ));
        assert!(matches!(
            q(vec![MASK, MASK], 0).validate(10),
            Err(KnError::Query(_))
        ));
        assert!(matches!(
            q(vec![CLS, 50, MASK], 2).validate(10),
            Err(KnError::Index(_))
        ));
    }
}
