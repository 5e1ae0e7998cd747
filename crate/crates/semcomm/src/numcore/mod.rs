//! Deterministic numeric substrate: dense matrices, the differentiable
//! operations every network here is built from, a seeded random stream,
//! and finite-difference gradient verification.

pub mod attention;
mod gradcheck;
mod matrix;
mod ops;
mod rng;
mod store;
mod tape;

pub use gradcheck::{grad_check, tape_grad_check};
pub use matrix::{Mat, Matrix, Scalar};
pub use ops::{
    backward, forward, gelu, linear_forward, softmax, OpKind, GELU_CUBIC_COEFF,
    GELU_SQRT_2_OVER_PI,
};
pub use rng::RngStream;
pub use store::{gaussian_matrix, TensorStore, TId};
pub use tape::{Gradients, Tape, VId};
