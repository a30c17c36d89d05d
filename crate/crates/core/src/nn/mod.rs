//! Inception-style convolutional network with manual backpropagation.

mod checkpoint;
mod config;
pub mod layers;
mod model;
mod preprocess;
mod tensor;

use thiserror::Error;

use crate::task::Task;

pub use checkpoint::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use config::{BlockConfig, Chain, ModelConfig, ScalePreset};
pub use model::{
    build_model, head_bias_name, head_weight_name, softmax, BnMode, BnStats, LossGrads, Model, TaskHead,
};
pub use preprocess::preprocess;
pub(crate) use preprocess::resize_bilinear;
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model has no {0} head")]
    MissingHead(Task),
    #[error("label {label} outside [0, {n_classes})")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("cannot decode checkpoint: {0}")]
    Decode(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
