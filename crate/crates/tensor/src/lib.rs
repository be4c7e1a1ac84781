//! Dense `f64` tensors with a reverse-mode autodiff tape.
//!
//! A [`Graph`] records every primitive as it executes; [`Graph::backward`]
//! replays the record in reverse. Model parameters live in a [`ParamStore`]
//! and are pulled onto a graph by name.

mod error;
pub mod gradcheck;
mod graph;
pub mod io;
pub mod ops;
mod params;
pub mod suite;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, param_grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::nn::NORM_EPS;
pub use ops::sample::cell_center;
pub use ops::shape::SparseMap;
pub use params::{ParamStore, Parameter};
pub use tensor::Tensor;
