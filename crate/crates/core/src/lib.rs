//! Variational p-capacity computations on cusp and Cantor-cylinder domains.

// `!(x > 0.0)` style guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::field_reassign_with_default)]

pub mod admissible;
pub mod analysis;
pub mod capsolve;
pub mod cli;
pub mod error;
pub mod extension;
pub mod geometry;
pub mod grid;
pub mod quad;

pub use error::{Error, Result};
