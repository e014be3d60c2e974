use std::io;

use thiserror::Error;

use crate::audio::{FbankError, WavError};
use crate::config::ConfigError;
use crate::embedder::EmbeddingFileError;
use crate::eval::EvalError;
use crate::tensor::TensorError;
use crate::weights::WeightsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("wav: {0}")]
    Wav(#[from] WavError),
    #[error("fbank: {0}")]
    Fbank(#[from] FbankError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("weights: {0}")]
    Weights(#[from] WeightsError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("embeddings: {0}")]
    EmbeddingFile(#[from] EmbeddingFileError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("weight file carries no model config")]
    MissingConfig,
    #[error("weight layout: {0}")]
    Layout(String),
    #[error("utterance '{id}': {source}")]
    Utterance { id: String, source: Box<Error> },
}

impl Error {
    /// Attach an utterance id, keeping an existing one.
    pub fn for_utterance(self, id: &str) -> Error {
        match self {
            e @ Error::Utterance { .. } => e,
            e => Error::Utterance { id: id.to_string(), source: Box::new(e) },
        }
    }
}
