//! Multi-study decoding of statistical brain maps.
//!
//! Labeled studies share a frozen non-negative dictionary `D` and a learned
//! reduction `L`; each study keeps its own softmax head. Training mixes
//! studies by size, regularizes with Gaussian or variational dropout, and an
//! ensemble of runs is condensed into a non-negative consensus basis.

pub mod analysis;
pub mod baseline;
pub mod checkpoint;
pub mod consensus;
pub mod corpus;
pub mod dictionary;
pub mod error;
pub mod experiment;
pub mod lbfgs;
pub mod linalg;
pub mod matfile;
pub mod metrics;
pub mod softmax;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
