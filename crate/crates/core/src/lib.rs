//! Allocation-only core of the dynamically stable system (DSS) detector.
//!
//! An input image is repeatedly disrupted at its lowest-saliency pixels and
//! restored by an inpainter. Adversarial inputs drift away from their
//! starting point under this loop while clean and noisy inputs stay put; the
//! drift, measured in pixel space and logit space, feeds a logistic-regression
//! detector.
//!
//! Everything here is pure computation over in-memory buffers. File formats,
//! subprocess adapters and the experiment CLI live in the `dss` crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attacks;
pub mod dynamics;
pub mod error;
pub mod inpaint;
pub mod model;
pub mod monitor;
pub mod rng;
pub mod stability;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Classifier, Network};
pub use rng::RandomSeed;
pub use tensor::{ImageTensor, LabeledExample, Shape, Tensor};

/// Finite-difference and closed-form helpers shared by unit tests.
#[cfg(test)]
pub(crate) mod testutil;
