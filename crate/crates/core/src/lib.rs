//! Anomaly detection for multivariate time series by aligning learned
//! dynamic graphs with optimal transport.

// `!(x > 0.0)` style guards are how NaN gets rejected alongside bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod flow;
pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod ot;
pub mod score;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Tape, Tensor, Var};
