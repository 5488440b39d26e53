//! Dense double-precision numerics with reverse-mode differentiation.

mod functional;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod params;
mod rng;
mod tensor;

pub use functional::{
    binary_cross_entropy, kl_divergence, layer_norm, smooth_l1, softmax, softmax_cross_entropy,
};
pub use gradcheck::{gradient_check, gradient_check_params, GradCheckReport, DEFAULT_STEP};
pub use graph::{Gradients, Graph, Var, LN_EPS, PROB_EPS};
pub use optim::{Adam, AdamConfig, AdamState, Moments, StepOutcome};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use rng::{derive_seed, seeded, Rng, RngState};
pub use tensor::Tensor;
