//! Exact finite-space and Monte Carlo laboratory for enlarging a filtration
//! by a random time whose conditional law admits a positive density.

// NaN-aware comparisons and index loops over parallel arrays are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod density_kernel;
pub mod error;
pub mod finite_space;
pub mod enlargement;
pub mod lattice;
pub mod mc_engine;
pub mod measure_change;
pub mod report;
pub mod theorem_suite;

pub use error::{LabError, Result};
