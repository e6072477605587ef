//! Frozen-embedding probing toolkit for vocalisation classification.

pub mod dataset;
pub mod dsp;
pub mod matrix;
pub mod store;
pub mod classifiers;
pub mod eval;
pub mod runner;
