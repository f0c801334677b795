//! Nanodiamond-ensemble (NDE) ODMR magnetometry toolkit.
//!
//! A film of randomly oriented nanodiamonds hosts NV centers whose optically
//! detected magnetic resonance (ODMR) spectrum encodes the local magnetic
//! field. This crate synthesizes such spectra from an orientation-averaged
//! physical model and estimates fields from them two ways:
//!
//! * [`gpr`] — model-free Gaussian-process regression on preprocessed
//!   spectra, with predictive uncertainty and cross-validated
//!   hyperparameters;
//! * [`modelfit`] — nonlinear least-squares fitting of the physical model
//!   itself, the conventional baseline.
//!
//! On top of those, [`pipeline`] provides the downstream analyses: per-pixel
//! field maps, accuracy/sensitivity extraction from integration-time sweeps,
//! error histograms, frequency-shift correction scans, and straight-wire
//! (Ampère-law) current fitting. [`dataset`] defines the on-disk formats and
//! [`cli`] the `ndmag` command-line front end; see `FORMATS.md` at the
//! repository root for the exact file layouts.
//!
//! All randomized operations take explicit seeds and every function is a pure
//! computation on its inputs, so results are reproducible bit-for-bit and
//! values can be shared freely across threads.

// Validation uses negated comparisons (`!(x > 0.0)`) on purpose: they reject
// NaN, which the suggested `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod gpr;
pub mod modelfit;
mod optim;
pub mod physics;
pub mod pipeline;
pub mod quad;

pub use gpr::{FeatureVector, GprModel, KernelHyperparams, Prediction};
pub use modelfit::{FitResult, FreeParams};
pub use physics::{FieldVector, NdeModelParams, OdmrSpectrum};
pub use pipeline::{AccuracyReport, FieldMap, WireModel};
