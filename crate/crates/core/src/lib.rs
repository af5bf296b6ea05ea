//! Instance-level recognition toolkit.
//!
//! Embedding-similarity matching, a difficulty-controlled gallery benchmark
//! builder with two-stage conversation formats, an attention-based expert
//! fusion adapter, a metric-learning expert trainer and the evaluation kit
//! that scores all of them.

pub mod checkpoint;
pub mod config;
pub mod dataengine;
pub mod embedstore;
pub mod error;
pub mod evalkit;
pub mod expert;
pub mod fusion;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod seeding;
pub mod simcore;
pub mod synthgen;

pub use error::{Error, Result};
