//! Primitive ops. Each submodule adds forward methods to [`Graph`](crate::Graph)
//! and provides the matching backward rules.

pub(crate) mod elementwise;
pub(crate) mod linalg;
pub mod nn;
pub mod sample;
pub mod shape;
