// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod nd;
pub mod data;
pub mod fed;
pub mod mi;
pub mod attack;
pub mod harness;

pub use error::{Error, Result};
