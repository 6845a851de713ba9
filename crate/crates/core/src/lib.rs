// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod params;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
