//! Carleman-weighted boundary control of linear and semilinear wave equations
//! on intervals and rectangles.

// `!(a <= b)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fixed_point;
pub mod forward;
pub mod geometry;
pub mod linear;
pub mod mesh;
pub mod solvers;

pub use error::{Error, Result};
