//! The document encoder: subword vocabulary, transformer, MLM pretraining
//! and checkpoint I/O.

pub mod checkpoint;
pub mod mlm;
pub mod model;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mlm::{mlm_pretrain, MlmConfig};
pub use model::{EncoderConfig, EncoderGrads, EncoderModel, EncoderParams, PhaseRecord};
pub use vocab::{EncodedBatch, Tokenized, VocabBuildOptions, Vocabulary};
