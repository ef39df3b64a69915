//! Feed-forward classifier with frozen backbone weights, per-task low-rank
//! branches, and a hand-written backward pass.

mod layer;
mod loss;
mod network;
mod optim;
mod pretrain;

pub use layer::{Activation, Branch, LoraLinearLayer};
pub use loss::local_ce_loss;
pub use network::{ForwardCache, GradMode, Gradients, Head, LayerGrad, Network, NetworkDims};
pub use optim::{
    apply_gradients, apply_head_gradients, OptimizerKind, OptimizerSpec, OptimizerState,
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use pretrain::{pretrain_backbone, PretrainConfig};
