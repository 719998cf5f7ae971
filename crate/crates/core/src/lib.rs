// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod bench;
pub mod collector;
pub mod config;
pub mod error;
pub mod geometry;
pub mod localizer;
pub mod policy;
pub mod regressor;
pub mod seed;
pub mod sensors;
pub mod sim;

pub use error::{Error, Result};
