//! Masked feed-forward network engine.
//!
//! Every weight element is a potential synapse with a mask bit. Masked
//! synapses hold exactly zero, are skipped by the forward pass and receive
//! exactly zero gradient.

mod arch;
mod layer;
mod network;
mod tensor;
mod train;

pub use arch::{count_synapses, Architecture, Node};
pub use layer::{infer_output, Activation, LayerKind, LayerSpec};
pub use network::{Gradients, InitRule, Loss, Network};
pub use tensor::{Shape, Tensor};
pub use train::{evaluate_loss, train, TrainConfig, Trained};
