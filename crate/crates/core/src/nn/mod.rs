//! Architecture specs, parameter storage and the gaze models.

mod model;
mod params;
mod spec;

pub use model::{ForwardPass, Mode, Model, ModelInput, TrunkLayer};
pub use params::{adam_update, Binder, Buffer, BufferId, Param, ParamId, ParamStore};
pub use spec::{
    minires_spec, multiregion_spec, patch_embedding, poolformer_spec, ArchKind, ArchitectureSpec, LayerKind,
    LayerSpec, MiniResConfig, ModelConfig, MultiRegionConfig, MultiRegionSpec, PoolFormerConfig, Shape,
};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NnError {
    #[error("architecture {name}, layer {layer}: {reason}")]
    Spec { name: String, layer: usize, reason: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}`: expected dims {expected:?}, got {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid model input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
