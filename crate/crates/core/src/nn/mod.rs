//! Minimal dense reverse-mode differentiation kernel (64-bit floats, rank ≤ 3).

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod params;
mod tape;
mod suite;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, grad_check_params, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use layers::{linear, AttnOutput, FeedForward, LayerNorm, Linear, MultiHeadAttention, LN_EPS};
pub use loss::{focal_loss, giou, giou_loss, l1_box};
pub use optim::{AdamW, Sgd};
pub use params::{ParamGrads, ParamStore};
pub use tape::{focal_match_cost, sigmoid, softplus, Gradients, Tape, Var};
pub use suite::{primitive_suite, SuiteEntry, PRIMITIVE_TOL, SUITE_EPS};
pub use tensor::Tensor;
