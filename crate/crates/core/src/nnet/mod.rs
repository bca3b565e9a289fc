//! P4 group-equivariant network: tensors, layers, the ResNet assembler and
//! the weights container.

mod conv;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod weights;

pub use layers::{BatchNorm, Layer, LogitHead, Mode, OrientationMaxPool, P4Conv, Param, ParamKind, Relu};
pub use model::{
    positive_probability, receptive_field, rgb_to_input, LayerSpec, Model, ModelConfig, StageConfig, StemConfig,
};
pub use tensor::GFeatureMap;
pub use weights::{ModelWeights, NamedTensor};
