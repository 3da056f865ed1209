//! Bayesian neural network training with structured multiplicative dropout.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense row-major `f64` tensors with broadcasting.
//! * [`rng`] — counter-based, splittable random streams (ChaCha8 + polar Gaussian).
//! * [`tape`] — reverse-mode autodiff over a flat operation tape.
//! * [`householder`] — orthogonal matrices as short products of Householder reflections.
//! * [`kl`] — closed-form KL divergences for structured multiplicative Gaussian posteriors.
//! * [`layers`] — variational layers (structured dropout, mean-field, MC dropout, ...).
//! * [`model`] — layer stacks, parameter registry, serialization.
//! * [`objective`] — stochastic negative evidence lower bound construction.
//! * [`optim`] — Adam / SGD-momentum with multi-step learning-rate decay.
//! * [`train`] — minibatch training loop with divergence handling and tracing.
//! * [`predict`] — Monte-Carlo posterior-predictive evaluation.
//! * [`metrics`] — calibration, uncertainty, and out-of-distribution scores.
//! * [`diagnostics`] — curvature-weighted noise regularizer and spectral statistics.
//! * [`verify`] — self-contained oracle suite wired into the CLI.
//!
//! With the default `parallel` feature the Monte-Carlo heavy paths fan out over
//! rayon; every parallel path has a sequential twin that produces bit-identical
//! results (work is split over pre-derived random substreams and reduced in a
//! fixed order), so the feature only changes wall-clock time, never numbers.

pub mod diagnostics;
pub mod error;
pub mod householder;
pub mod kl;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod predict;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::Error;
pub use rng::Rng;
pub use tensor::Tensor;
