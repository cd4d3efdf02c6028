//! Diagnostics for attention dilution from zero-padding in hierarchical
//! windowed 3D attention, plus the evaluation and representation-similarity
//! tooling around it.

pub mod adi;
pub mod augment;
pub mod cka;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod metrics;
pub mod subtypes;
pub mod swinsim;
pub mod synth;
pub mod volumes;

pub use error::{Error, Result};
pub use exec::Execution;
