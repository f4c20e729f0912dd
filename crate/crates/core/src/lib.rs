//! Tactile texture classification pipeline.
//!
//! The crate simulates a soft tactile sensor dragged across bump textures on a
//! rotating drum, extracts three artificial afferent signals from the recordings
//! (slowly-adapting marker displacement, rapidly-adapting displacement change,
//! and vibration spectra), optionally augments the spectra with frequency-domain
//! speed stretching, trains small neural networks from scratch, and evaluates
//! texture classification with a leave-one-speed-out protocol.
//!
//! Numeric code is generic over the scalar type via [`Scalar`]; the pipeline
//! runs at [`Real`] (f32) and verification paths use [`Wide`] (f64).

pub mod afferents;
pub mod cli;
pub mod drumsim;
pub mod evalharness;
pub mod ingest;
pub mod nn;
pub mod spectral;

mod scalar;

pub use scalar::Scalar;

/// Scalar used by the pipeline: simulation output, features, and training.
pub type Real = f32;

/// Scalar used by verification paths such as finite-difference gradient checks.
pub type Wide = f64;
