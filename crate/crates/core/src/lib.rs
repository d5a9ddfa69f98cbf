//! Minimizing-movement (JKO) scheme for the one-dimensional thin-film Muskat system,
//! with a finite-volume reference solver and a verification harness.

// `!(x > 0.0)` style tests are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod functionals;
pub mod fvref;
pub mod harness;
pub mod jko;
pub mod testfn;
pub mod transport1d;
