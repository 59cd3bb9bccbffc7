//! Random geometric particle configurations, truncated dissipative SDE
//! lattice systems, and numerical checks of the weighted-scale estimates
//! that control them.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod convergence;
pub mod error;
pub mod geometry;
pub mod numeric;
pub mod ovsjannikov;
pub mod sde;
pub mod spaces;

pub use error::{Error, Result};
