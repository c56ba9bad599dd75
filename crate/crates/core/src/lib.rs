//! Simulation and verification toolkit for weakly dependent random fields on `Z^d`:
//! lattice geometry, moment-inequality constants, field generators with exact covariance,
//! partial sums, a quantile-transform coupling with a multiparameter Wiener process, and
//! Monte Carlo verifiers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coupling;
pub mod error;
pub mod fields;
pub mod lattice;
pub mod rng;
pub mod stats;
pub mod sums;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
pub use fields::{FieldModel, Innovation};
pub use lattice::{Block, MultiIndex};
