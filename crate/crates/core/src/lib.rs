//! Multilayer perceptrons trained with backpropagation or feedback alignment,
//! random-noise pretraining, and the analysis metrics used to study them.

pub mod data;
pub mod error;
pub mod learn;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod noise;
pub mod record;
pub mod runner;
pub mod seed;

pub use data::Dataset;
pub use error::{Error, Result};
pub use learn::{Rule, TrainConfig};
pub use linalg::Matrix;
pub use net::Mlp;
pub use record::{Phase, RunRecord};
