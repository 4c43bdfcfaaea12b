//! Verification-and-correction prompting for data-to-text generation.
//!
//! A small encoder-decoder generates text from a meaning representation, a
//! rule-based checker verifies slot coverage, and trainable prompt tokens
//! inserted next to the slots the first attempt missed steer the frozen model
//! into a corrected regeneration.

pub mod checker;
pub mod config;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod mr;
pub mod pipeline;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
