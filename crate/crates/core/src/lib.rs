//! Differentiable source-filter synthesis and spectral losses on a tape-based
//! reverse-mode autodiff engine.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: file formats, dataset persistence and the command-line front
//! end live in the `ddsp` companion crate.
//!
//! Module map:
//!
//! - [`autodiff`]: dense `f64` tensors, the gradient [`Tape`], reverse sweeps,
//!   forward tangent sweeps and finite-difference gradient checking.
//! - [`synth`]: harmonics-plus-noise excitation, lattice all-pole filter and
//!   source mixing.
//! - [`spectral`]: magnitude spectrograms, the multiscale spectral loss,
//!   representation distances and a second-order temporal scattering
//!   operator.
//! - [`separation`]: the per-frame separator network and its unsupervised
//!   reconstruction training loop.
//! - [`soundmatch`]: Jacobians of the representation of a synthesized sound,
//!   Gram matrices and the quadratic (PNP) surrogate loss.
//! - [`datagen`]: in-model synthetic data sampling.
//! - [`metrics`]: SI-SDR and permutation-resolved matching.

#![no_std]
// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod datagen;
mod error;
pub mod fft;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod separation;
pub mod soundmatch;
pub mod spectral;
pub mod synth;

pub use autodiff::{grad_check, GradCheckReport, Gradients, Tape, Tensor, Var};
pub use error::{Error, Result};
