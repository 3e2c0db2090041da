//! Frozen miniature text encoder, tokenizer and image-feature boundary.

mod features;
mod model;
mod vocab;

pub use features::FeatureSet;
pub use model::{EncoderConfig, EncoderOutput, FrozenEncoder};
pub use vocab::{normalize, TokenSequence, Vocabulary, BOT, EOT, NUM_SPECIAL, PAD, UNK};
