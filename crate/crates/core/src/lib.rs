//! Reverse-dictionary definition models.
//!
//! A gloss (the text of a definition or a crossword clue) is embedded token by
//! token, composed by an LSTM encoder, and projected into the space of
//! pretrained word vectors, where candidate head words are ranked by cosine
//! similarity. Crossword answering restricts the candidates to words of the
//! required length.

pub mod corpus;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod math;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
