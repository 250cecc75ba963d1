#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod cli;
pub mod domains;
pub mod error;
pub mod evi;
pub mod generate;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod transcript;

pub use error::{Error, Result};
