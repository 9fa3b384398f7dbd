//! Losses, prediction, optimization and the epoch loop.

pub mod fit;
pub mod loss;
pub mod optim;
