//! Dense reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every forward
//! primitive together with whatever it needs for the backward pass, and
//! [`Graph::backward`] returns parameter gradients that the caller folds into
//! the store. Everything is generic over [`Real`] so the same model code runs
//! in `f32` for training and `f64` for gradient verification.

mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
pub mod primitives;
mod real;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, LossFn, Precision, FD_STEP};
pub use graph::{inverse_softplus, Gradients, Graph, Mode, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
