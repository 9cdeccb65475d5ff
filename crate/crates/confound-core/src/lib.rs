//! Core library for studying regression slope recovery when the signal and
//! an unobserved smooth disturbance are correlated Gaussian random fields.
//!
//! The crate is organized bottom-up:
//!
//! - [`special`] — fractional-order modified Bessel K, the one special
//!   function the covariance kernels need at high accuracy.
//! - [`linalg`] — dense symmetric kernels: blocked Cholesky, triangular
//!   solves, batched sampling products.
//! - [`covmodels`] — stationary and non-stationary covariance families and
//!   their small-lag expansion exponents.
//! - [`fields`] — sampling designs, joint covariance assembly, and exact
//!   Gaussian field simulation with optional heavy-tail scale mixing.
//! - [`estimators`] — slope estimators: raw least squares, differencing
//!   ladders, grid-Laplacian filters, averaging-then-differencing,
//!   spacing-adapted second differences, generalized least squares, and a
//!   two-stage split for a second correlated regressor.
//! - [`estimability`] — rules and spectral-tail diagnostics that classify
//!   whether the slope is recoverable for a given model pair, plus a
//!   data-driven smoothness probe and filter-order recommendation.
//! - [`harness`] — replicated experiment runner, summary statistics, and
//!   convergence-rate checks with CSV/JSON emission.

pub mod covmodels;
pub mod error;
pub mod estimability;
pub mod estimators;
pub mod fields;
pub mod harness;
pub mod linalg;
mod par;
pub mod special;

pub use error::{Error, Result};
