//! Tensors, layers, recorded differentiation and optimization.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layer;
pub mod optim;
pub mod resize;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layer::{apply_layer, Layer, LayerKind, LEAKY_SLOPE, NORM_EPS};
pub use optim::{adam_update, lr_at, softmax, LrSchedule, OptimizerState, ADAM_BETAS, ADAM_EPS};
pub use resize::{resize, resize_area, resize_bilinear, ResizeKind};
pub use tensor::{FeatureMap, Tensor};
