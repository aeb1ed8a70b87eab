//! Document-image pipeline engine.
//!
//! Preprocessing (grayscale, tiled super-resolution, CLAHE), differentiable
//! binarization post-processing into text-region polygons, zero-shot NLI
//! classification, and polygon detection evaluation. Every neural forward
//! pass sits behind the traits in [`backends`], with deterministic stubs and
//! an out-of-process runner protocol.

pub mod backends;
pub mod classify;
pub mod config;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod pipeline;

pub use config::AppConfig;
pub use error::Error;
pub use pipeline::{Pipeline, PipelineSettings, StageTimings};
