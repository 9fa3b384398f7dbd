//! Windowed approximate forward-gradient training for recurrent spiking
//! networks, with step-by-step reference oracles and verification suites.

#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod config;
pub mod container;
pub mod data;
pub mod engine;
pub mod error;
pub mod network;
pub mod neuron;
pub mod oracles;
pub mod pool;
pub mod run;
pub mod scalar;
pub mod sstage;
pub mod tensor;
pub mod training;
pub mod verify;

#[cfg(test)]
mod testutil;

pub use error::{HyprError, Result};
pub use scalar::{Precision, Scalar};

pub type Network32 = network::Network<f32>;
pub type Network64 = network::Network<f64>;
pub type Gradients32 = engine::Gradients<f32>;
pub type Gradients64 = engine::Gradients<f64>;
pub type Dataset64 = data::Dataset<f64>;
