//! Tensor-network and neural-network layers over a small dense tensor type,
//! with reverse-mode gradients, optimisers, losses and MNIST-style data.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{backward, backward_into, forward, GradientSet, Tape};
pub use embedding::{embed_image, feature_map, FeatureMap, ProductState};
pub use layers::{Activation, ConvGeometry, InputSpec, Layer, LayerSpec, ModelSpec};
pub use metrics::{Loss, MetricKind, Target};
pub use model::Model;
pub use optim::{AdamState, Optimizer};
pub use tensor::{contract, Tensor, TensorError};
pub use train::{evaluate, train_epoch, Dataset, TrainConfig};
