//! Cooperative target sensing over a capacity-limited wireless backhaul.
//!
//! The pipeline: each receiver observes a delayed, attenuated echo of a
//! Gaussian probing pulse, estimates the delay and effective reflecting
//! coefficient by ML, and uploads those estimates. The fusion center then
//! allocates quantization bits per KLT coefficient — minimizing shared-MAC
//! channel uses subject to a position-CRLB budget — via a successive convex
//! approximation solver with an LMI-reformulated Fisher constraint, plus
//! greedy node selection and a low-complexity bit reallocation variant.
//! Selected receivers upload Lloyd-quantized window coefficients, and the
//! fusion center localizes the target by ML, with information-domain and
//! signal-domain baselines for comparison.

pub mod error;
pub mod signal;
pub mod estimator;
pub mod klt;
pub mod fusion;
pub mod backhaul;
pub mod harness;

pub use error::{CoopError, Result};
