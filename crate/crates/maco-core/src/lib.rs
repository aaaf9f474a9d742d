//! Feature visualization by phase-only spectrum optimization.
//!
//! The toolkit synthesizes inputs that maximize scalar criteria of a
//! differentiable classifier by optimizing the Fourier phase of the image
//! under a fixed natural-image magnitude template, alongside two reference
//! baselines (full-spectrum Fourier preconditioning and raw pixel ascent),
//! an evaluation harness (plausibility, Fréchet distance, transferability,
//! spectrum diagnostics), feature inversion, and concept visualization via
//! non-negative factorization of patch activations.

pub mod error;
mod binio;
pub mod image;
pub mod models;
pub mod objectives;
pub mod spectral;
pub mod transforms;