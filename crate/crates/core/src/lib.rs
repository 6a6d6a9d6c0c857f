//! Linear near-optimal extension operators for the sum space
//! `L^{m,p}(R^n) + L^p(dμ)` with `μ` a finite atomic measure.
//!
//! The crate is organised as follows.
//!
//! * [`jets`]: multi-indices, labels, polynomial jets and their norms.
//! * [`measures`]: atomic measures, normalization, restriction and input parsing.
//! * [`oracle`]: variational solvers for every functional used by the operator.
//! * [`dyadic`]: dyadic cubes, the Calderón–Zygmund decomposition, keystone cubes and chains.
//! * [`pou`]: partitions of unity and cutoff gluing.
//! * [`linmap`]: linear selectors of near-minimizers.
//! * [`extension`]: the operator `T`, the functional `M` and the functional ledger.
//! * [`norms`]: independent norm estimators and audits.

// Weights and tolerances are validated with negated comparisons so that NaN
// is rejected, and index loops mirror the formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod dyadic;
pub mod error;
pub mod extension;
pub mod field;
pub mod jets;
pub mod linmap;
pub mod measures;
pub mod norms;
pub mod oracle;
pub mod pou;
pub mod quad;

pub use config::{OraclePath, RunConfig};
pub use error::{Error, Result};
