//! Byte-level tokenizer: ids 0..=255 are raw bytes, ids from 256 upward are
//! control tokens.

use crate::error::{HolaError, Result};

pub type TokenId = u32;

pub const EOS_ID: TokenId = 256;
pub const SEP_ID: TokenId = 257;
pub const PAD_ID: TokenId = 258;
pub const BOS_ID: TokenId = 259;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteTokenizer {
    vocab_size: usize,
}

impl ByteTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 256 {
            return Err(HolaError::Domain(format!(
                "byte tokenizer needs vocab_size >= 256, got {vocab_size}"
            )));
        }
        Ok(Self { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        tokenize(text)
    }

    /// Control tokens render as nothing; ids outside the vocabulary fail.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(HolaError::Domain(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect())
    }
}

pub fn tokenize(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| TokenId::from(b)).collect()
}

pub fn is_control(id: TokenId) -> bool {
    id >= 256
}
