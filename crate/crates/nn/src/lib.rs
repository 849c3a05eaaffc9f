//! Small dense-tensor library with reverse-mode automatic differentiation.
//!
//! Everything is `f64` and CPU-only. A forward pass records ops on a
//! [`Graph`]; [`Graph::backward`] returns [`Gradients`] keyed by the
//! [`ParamId`]s of a [`ParamStore`], which [`adam_step`] then consumes.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor, TrainingSection};
pub use error::{NnError, Result};
pub use graph::{log_sum_exp, CustomOp, Graph, NodeGrads, Var};
pub use layers::{
    AttentionConfig, AttentionOutput, Conv2d, ConvBlock, DecoderLayer, EncoderLayer, FeedForward,
    LayerNorm, Linear, MultiHeadAttention,
};
pub use loss::{gaussian_nll, kl_standard_normal, softmax_cross_entropy};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
