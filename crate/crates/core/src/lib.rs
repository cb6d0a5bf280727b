//! Translation pair prediction (TPP): an intermediate pretraining phase that
//! aligns a multilingual encoder's document embeddings across languages
//! before source-language fine-tuning, plus the corpus, fine-tuning,
//! evaluation and analysis pipeline around it.

pub mod analysis;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tasks;
pub mod tpp;

pub use error::{Error, Result};
