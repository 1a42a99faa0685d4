//! Primal-dual solvers for weighted least-squares image reconstruction with
//! an ℓ1 penalty on stacked finite differences.
//!
//! The crate has three layers. The bottom layer is generic linear-operator
//! plumbing ([`linop`]), the difference-stack regularizer ([`reg`]), and a
//! small parallel-beam CT testbed ([`ct`]). On top of that sit the solvers
//! ([`solver`]): a conditional-gradient method whose dual state never grows
//! beyond image size, and a projection-based reference method that keeps
//! the full transform-space dual. The top layer is diagnostics and
//! orchestration: convergence metrics and the memory ledger ([`metrics`]),
//! binary image plus CSV serialization ([`io`]), and the config-driven
//! experiment harness ([`experiment`]).
//!
//! Everything is deterministic: seeded RNG for data simulation and norm
//! estimation, single-threaded application, no wall-clock dependence unless
//! explicitly requested.

// Validation uses negated comparisons such as `!(x > 0.0)` so that NaN is
// rejected alongside out-of-range values; rewriting them as `x <= 0.0` would
// accept NaN. Numeric kernels use indexed loops where the index mirrors the
// subscript in the underlying formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod ct;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linop;
pub mod metrics;
pub mod reg;
pub mod solver;

pub use error::{Error, Result};
