//! Hyperbolic state space hallucination (HSSH) for fine-grained domain
//! generalization, built on a small CPU autodiff engine.
//!
//! - [`tensor`]: dense `f64` tensors, reverse-mode tape, Adam.
//! - [`poincare`]: Möbius addition, exponential maps, geodesic distance.
//! - [`ssm`]: four-stage selective-scan encoder and classifier head.
//! - [`style`]: style statistics, slope fitting and feature hallucination.
//! - [`losses`]: hyperbolic consistency and classification objectives.
//! - [`harness`]: synthetic benchmark, training, evaluation and verification.

pub mod error;
pub mod harness;
pub mod losses;
pub mod poincare;
pub mod ssm;
pub mod style;
pub mod tensor;

pub use error::{Error, Result};
