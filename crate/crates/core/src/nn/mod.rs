//! Small feed-forward networks with exact reverse-mode gradients, plus the
//! optimizer and parameter-averaging state used by the training loops.

pub mod ema;
pub mod mlp;
pub mod optim;

pub use ema::{ema_update, EmaState};
pub use mlp::{
    grad_check, mlp_backward, mlp_forward, Activation, ActivationCache, MlpSpec, ParamLayout,
    ParamSet, ParamSlice,
};
pub use optim::{adamw_step, OptimizerState};
