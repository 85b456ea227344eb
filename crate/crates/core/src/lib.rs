//! Differentiable architecture search over a cell-based super-network with
//! partial channel connections and edge normalization.
//!
//! Layering, bottom up:
//! - [`tensor`]: dense tensors, tape autodiff, optimizers, checkpoints;
//! - [`ops`]: the eight candidate operations plus stem and classifier;
//! - [`space`]: cells, mixed edges, and the full super-network;
//! - [`search`]: the bilevel alternating optimization loop and sweeps;
//! - [`genotype`]: discrete architecture derivation, costs, DOT output;
//! - [`data`]: CIFAR-10 ingestion, synthetic sets, splits, batching;
//! - [`config`]: the TOML run configuration shared with the CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod genotype;
pub mod ops;
pub mod rng;
pub mod search;
pub mod space;
pub mod tensor;

pub use error::{Error, Result};
