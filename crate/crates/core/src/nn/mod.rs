//! Minimal feed-forward networks with exact reverse-mode gradients.

mod checkpoint;
mod layer;
pub mod linalg;
mod loss;
mod network;
mod tensor;

pub use checkpoint::Checkpoint;
pub use layer::{logistic, Activation, LayerSpec, Padding};
pub use loss::{bce_grad, bce_loss, penalty_value, BCE_EPSILON};
pub use network::{
    init_bound, BatchSource, BnStats, ForwardCache, GradientSet, Layer, Mode, Network, Penalty,
    BN_EPSILON,
};
pub use tensor::Tensor;
