//! Multi-stage encoder-decoder semantic segmentation with semantic prediction guidance.

pub mod assembly;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datapipe;
pub mod decoder;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod objective;
pub mod profile;
pub mod selftest;
pub mod tensor;
pub mod visualize;

pub use error::{Error, Result};
