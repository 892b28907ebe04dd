//! Layer graphs with a named parameter registry, plus the architectures
//! used for benchmarking.

mod graph;
mod zoo;

pub use graph::{GraphBuilder, Gradients, LayerKind, LayerNode, Model, NodeId, ParamInfo};
pub use zoo::{basic_block, build_alexnet_cifar, build_basic_block, build_model, build_resnet18_cifar, build_tinycnn, ModelName};
