//! Grammar-feature injection and latent-space measurement for a tiny
//! masked LM: polypersonal augmentation of Russian text, subword
//! tokenization, frozen-backbone fine-tuning, pseudo-perplexity scoring,
//! layer probing, and persistent-homology comparison of representations.

pub mod augment;
pub mod error;
pub mod harness;
pub mod model;
pub mod par;
pub mod pll;
pub mod probe;
pub mod tda;
pub mod seeds;
pub mod tokenizer;

pub use error::{Error, Result};
