//! Dense numerics, reverse-mode differentiation, optimization, and tensor
//! persistence.

mod adam;
mod array;
pub mod checkpoint;
mod gradcheck;
mod mlp;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::{dot, logsumexp, matvec, matvec_t, sigmoid, softmax, softplus, Array};
pub use gradcheck::{grad_check, GradCheck};
pub use mlp::Mlp;
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
