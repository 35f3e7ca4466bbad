//! Dense numerics: row-major matrices, a ReLU multilayer perceptron with
//! hand-written backpropagation, and Nesterov SGD with cosine annealing.

mod mlp;
mod optim;
mod tensor;

pub use mlp::{
    backward_cached, forward_cached, mlp_backward, mlp_forward, ForwardCache, Gradients, MlpParams,
};
pub use optim::{cosine_lr, sgd_nesterov_step, OptimizerState};
pub use tensor::{softmax, softmax_rows, Tensor2};
