use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Number of `<tokenN>` symbols at the head of the vocabulary.
    pub prompt_tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Also give prompted sources `k` trainable key/value prefix rows in
    /// every decoder self-attention layer.
    pub prompt_in_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            prompt_tokens: 0,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 128,
            max_len: 128,
            dropout: 0.1,
            seed: 0,
            prompt_in_decoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < crate::vocab::RESERVED.len() + self.prompt_tokens {
            return fail(format!(
                "model.vocab_size {} is smaller than the reserved and prompt symbols",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "model.d_model ({}) must be a positive multiple of model.heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("model.enc_layers and model.dec_layers must be at least 1".into());
        }
        if self.ff_dim == 0 || self.max_len == 0 {
            return fail("model.ff_dim and model.max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("model.dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}
