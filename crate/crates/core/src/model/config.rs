use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder–decoder scorer and its identifier space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding / hidden width.
    pub d_model: usize,
    /// Identifier length (number of code positions).
    pub docid_len: usize,
    /// Codes per position.
    pub docid_vocab: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward inner width.
    pub ffn_dim: usize,
    /// Natural-language vocabulary size.
    pub token_vocab: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            docid_len: 32,
            docid_vocab: 256,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            token_vocab: 1024,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.docid_len < 1 {
            return Err(Error::Config("docid_len must be >= 1".into()));
        }
        if self.docid_vocab < 1 {
            return Err(Error::Config("docid_vocab must be >= 1".into()));
        }
        if self.ffn_dim == 0 || self.token_vocab == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "ffn_dim, token_vocab and max_seq_len must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
