//! Minimal reverse-mode differentiation over dense `f64` arrays, plus the
//! optimizer and gradient utilities the models are trained with.

mod graph;
mod optim;
mod tensor;

pub use graph::{concat_features, mean_sq_err, softmax_cross_entropy, Gradients, Graph, Var};
pub use optim::{clip_global_norm, global_norm, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::Tensor;
