// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod dmae;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geom;
pub mod gradcheck;
pub mod heads;
pub mod io;
pub mod model;
pub mod nn;
pub mod report;
pub mod scene;
pub mod sim;
pub mod train;
pub mod xua;

pub use error::{Error, Result};
