// Negated comparisons deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod bootstrap;
pub mod config;
pub mod data;
pub mod error;
pub mod flcm;
pub mod fpca;
pub mod linalg;
pub mod par;
pub mod quadrature;
pub mod sim;
pub mod smooth;
pub mod solver;
pub mod tuning;

pub use basis::{Domain, PenaltyMatrices, SplineBasis};
pub use error::{FlcmError, Result};
