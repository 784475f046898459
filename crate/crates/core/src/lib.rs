//! Core library for a linear-time graph transformer whose node tokens are
//! spike-count descriptors produced by spiking neurons over random-feature
//! propagation.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod optim;
pub mod train;
pub mod graph;
pub mod neuron;
pub mod sparse;
pub mod tokenizer;

pub use error::{Error, Result};
