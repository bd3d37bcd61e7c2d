//! Model reprogramming for frozen audio classifiers: trainable input
//! transforms and output label mappings around a backbone that never changes.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataio;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod frontend;
pub mod mapping;
pub mod nn;
pub mod optim;
pub mod report;
pub mod reprogrammers;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
