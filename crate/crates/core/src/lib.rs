// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod config;
pub mod error;
pub mod logsig;
pub mod net;
pub mod nrde;
pub mod problems;
pub mod rng;
pub mod sde;
pub mod train;

pub use error::{Error, Result};
