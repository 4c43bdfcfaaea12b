//! The encoder-decoder transducer, its deep prompt parameters, decoders and
//! checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod layout;
pub mod ops;
pub mod prompt;
pub mod scalar;
pub mod transformer;

use sha2::{Digest, Sha256};

pub use config::ModelConfig;
pub use decode::{beam_decode, greedy_decode, sample_decode, Hypothesis, ScoredOutput, StepScorer};
pub use prompt::PromptParams;
pub use scalar::Scalar;
pub use transformer::{Grads, Model, Pair, Trainable};

/// SHA-256 over the little-endian bytes of a parameter vector.
pub fn checksum<F: Scalar>(data: &[F]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * F::BYTES);
    for &v in data {
        v.put_le(&mut bytes);
    }
    hex::encode(Sha256::digest(&bytes))
}
