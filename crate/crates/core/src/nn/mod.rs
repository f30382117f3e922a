//! Layer graphs with hand-written forward and backward passes.

pub mod arch;
mod layers;
mod network;
mod tensor;

pub use arch::{
    by_name, cnn, resnet18_cifar, tiny_cnn, ArchBuilder, ArchNode, Architecture, ConvLayerSpec, NodeKind, WeightShape,
    ARCHITECTURES,
};
pub use layers::{batchnorm_forward, conv_forward, factorized_conv_forward, softmax_cross_entropy, BN_EPSILON};
pub use network::{Layer, LayerTape, Network, Op, Param, ParamRole};
pub use tensor::ActivationTensor;

#[cfg(test)]
mod tests;
