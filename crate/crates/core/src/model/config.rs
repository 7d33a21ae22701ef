use serde::{Deserialize, Serialize};

use crate::error::{HolaError, Result};

/// Architecture of a toy pre-norm decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub const DEFAULT_VOCAB: usize = 260;
    pub const DEFAULT_MAX_SEQ: usize = 256;

    /// Desk-scale draft model: 2 layers, width 64.
    pub fn draft() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            vocab_size: Self::DEFAULT_VOCAB,
            max_seq_len: Self::DEFAULT_MAX_SEQ,
        }
    }

    /// Desk-scale verifier: 4 layers, width 128.
    pub fn verifier() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            vocab_size: Self::DEFAULT_VOCAB,
            max_seq_len: Self::DEFAULT_MAX_SEQ,
        }
    }

    /// Full-size draft: 6 layers, width 512.
    pub fn full_draft() -> Self {
        Self {
            n_layers: 6,
            d_model: 512,
            n_heads: 8,
            ..Self::draft()
        }
    }

    /// Full-size verifier: 12 layers, width 768.
    pub fn full_verifier() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            ..Self::verifier()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(HolaError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(HolaError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 256 {
            return Err(HolaError::Config(format!(
                "byte-level vocabulary needs at least 256 ids, got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}
