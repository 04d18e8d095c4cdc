//! Minimal differentiable-model engine.

mod model;
mod optim;
mod param;
mod train;

pub use model::{
    argmax, forward, log_sum_exp, loss_and_grad, predict, softmax, Activation, Architecture, Batch, ModelSpec,
};
pub use optim::{adam_step, sgd_step, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use param::{Group, ParamVector, PerGroup, Span};
pub use train::{accuracy, train_full_batch, LabeledBatch};
