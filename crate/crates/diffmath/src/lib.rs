//! Dense tensor numerics with a reverse-mode gradient tape.
//!
//! Every primitive the policy uses lives here so its gradient can be checked
//! against finite differences in isolation. Values are row-major matrices;
//! vectors are `1 × n` rows.

mod error;
pub mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

pub use error::{DiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Binder, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

/// Frequency base of the rotary embedding schedule.
pub const ROPE_BASE: f64 = 10_000.0;
