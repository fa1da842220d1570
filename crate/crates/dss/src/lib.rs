//! File formats, adapters, experiment harness and CLI plumbing for the DSS
//! adversarial-example detector. The numerical work lives in `dss-core`.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod formats;
pub mod harness;
pub mod idx;

pub use dss_core;
pub use error::{DssError, Result};
