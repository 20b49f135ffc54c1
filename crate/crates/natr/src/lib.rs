//! Command-line side of the rephraser-augmented NAT toolkit: corpus files,
//! run configuration, checkpoints, the training loop, evaluation reports
//! and the oracle self-test.
//!
//! The numerical work lives in [`natr_core`]; this crate adds everything
//! that touches files, threads or the clock.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod eval;
pub mod prefetch;
pub mod runner;
pub mod selftest;
