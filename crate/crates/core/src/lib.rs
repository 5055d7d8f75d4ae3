//! Quasi-symplectic Langevin variational inference.

pub mod error;
pub mod flows;
pub mod linalg;
pub mod models;
pub mod ndgrad;
pub mod checks;
pub mod data;
pub mod numdiff;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
pub use ndgrad::{BoundParams, Graph, ParamSet, Tensor, Var};
