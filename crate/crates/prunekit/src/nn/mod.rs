//! Minimal dense feed-forward engine: forward evaluation, per-sample loss,
//! first derivatives, exact per-sample Hessian diagonals, and SGD training.

pub mod activation;
pub mod autodiff;
pub mod forward;
pub mod model;
pub mod train;

pub use activation::Activation;
pub use autodiff::{
    backward, batch_mean_gradient, derivative_moments, hessian_diag, DerivativeMoments,
    PerSampleDerivatives,
};
pub use forward::{forward, logits, loss, mean_loss, scores, Mode, SCORE_CLAMP};
pub use model::{
    init_random, Batch, BatchNorm, DenseLayer, LayerMask, LayerSpec, Model, ModelSpec, ParamKind,
    ParamRef,
};
pub use train::{train, TrainConfig};
