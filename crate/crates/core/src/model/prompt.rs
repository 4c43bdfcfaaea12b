use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::layout::PromptLayout;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Standard deviation of the initial prompt input embeddings.
pub const PROMPT_EMB_INIT_STD: f64 = 0.02;

/// Trainable deep prompt parameters: one input embedding per prompt token and
/// per-layer key/value rows that replace the projections at prompt positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams<F> {
    layout: PromptLayout,
    data: Vec<F>,
}

impl<F: Scalar> PromptParams<F> {
    /// Zero key/value rows and small Gaussian input embeddings.
    pub fn init(config: &ModelConfig, k: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, PROMPT_EMB_INIT_STD).expect("valid std");
        for v in p.layout.emb.of_mut(&mut p.data) {
            *v = F::of(normal.sample(&mut rng));
        }
        Ok(p)
    }

    pub fn zeros(config: &ModelConfig, k: usize) -> Result<Self> {
        if k == 0 || k > config.prompt_tokens {
            return Err(Error::Config(format!(
                "prompt count k={k} must be between 1 and the vocabulary's {} prompt tokens",
                config.prompt_tokens
            )));
        }
        let layout = PromptLayout::new(config, k);
        let data = vec![F::zero(); layout.total];
        Ok(PromptParams { layout, data })
    }

    pub fn from_data(config: &ModelConfig, k: usize, data: Vec<F>) -> Result<Self> {
        let mut p = Self::zeros(config, k)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "prompt parameter vector has {} values, expected {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    pub fn layout(&self) -> &PromptLayout {
        &self.layout
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn has_decoder_prefix(&self) -> bool {
        !self.layout.dec_k.is_empty()
    }

    pub fn checksum(&self) -> String {
        super::checksum(&self.data)
    }

    pub fn cast<G: Scalar>(&self) -> PromptParams<G> {
        PromptParams {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}
