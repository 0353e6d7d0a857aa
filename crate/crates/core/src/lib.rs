//! Deterministic numerics for layered ("stem") generation with flow matching.
//!
//! This crate is the algorithmic core of stemlab. It contains no IO: models,
//! training loops, guided velocity fields, ODE samplers, synthetic scene
//! generators, evaluation metrics, and exact grid-density oracles all operate
//! on plain `f64` buffers so that every run is reproducible bit for bit from
//! a 64-bit seed.
//!
//! The crate is `no_std` (with `alloc`); all transcendental math goes through
//! [`math`], which wraps the pure-Rust `libm` so results do not depend on the
//! platform's libm.
//!
//! The companion `stemlab` crate layers file formats, CSV/SVG/WAV output, and
//! the command-line pipeline on top of this one.

#![no_std]

extern crate alloc;

pub mod cond;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod synth;

pub use error::CoreError;
pub use rng::Rng;
