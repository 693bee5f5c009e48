//! Depth completion from sparse measurements and a synchronized color image.
//!
//! Dense depth is estimated coarse-to-fine; at every scale a dense initial
//! map is propagated from the sparse measurements by a learned bilateral
//! model, fused with image features through a small U-Net, and refined by
//! iterative convolutional spatial propagation. Everything differentiable
//! runs on the tape-based f64 engine in [`autodiff`].

pub mod autodiff;
pub mod bp;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod refine;
pub mod sparse;
pub mod synthetic;

mod error;

pub use error::{BpError, Result};
