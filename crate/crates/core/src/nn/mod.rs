//! Network definitions: DenseNet backbone, pyramid attention, the CT classifier,
//! the CXR composite network, and the checkpoint container.

pub mod attention;
pub mod checkpoint;
pub mod densenet;
pub mod layers;
pub mod model;
pub mod params;

use thiserror::Error;

pub use attention::{AttentionConfig, PyramidAttention};
pub use checkpoint::{Checkpoint, CheckpointMeta, TrainState};
pub use densenet::{DenseNet, DenseNetConfig};
pub use model::{
    AttentionClassifier, AuxExtractor, AuxSource, AuxSpec, Backbone, CxrNet, HeadSpec, Model,
    ModelSpec, OutputActivation, Prediction, Task,
};
pub use params::{Builder, ParamStore, TensorData};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("missing auxiliary checkpoint: {0}")]
    MissingAuxCheckpoint(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("invalid class index {class} for a model with {outputs} outputs")]
    InvalidClass { class: usize, outputs: usize },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
