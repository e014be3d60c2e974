//! Lightweight speaker-embedding extractor: log-mel features, a
//! depthwise-separable convolution front-end, a densely connected TDNN with
//! context-aware masking, statistics pooling, cosine scoring, detection
//! metrics and complexity profiling. Inference only, CPU, f32.

pub mod audio;
pub mod cli;
pub mod config;
pub mod dsm;
pub mod dtdnn;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod model;
pub mod profile;
pub mod tensor;
pub mod weights;

pub use config::{ConfigError, DsmConfig, ModelConfig};
pub use error::Error;
pub use model::{extract_embedding, init_weights, LightCam};
pub use tensor::{Tensor, TensorError};
pub use weights::{load_weights, save_weights, WeightStore, WeightsError};
