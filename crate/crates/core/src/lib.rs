pub mod analysis;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Conv2dSpec, Graph, Reduction, Var};
pub use nn::{ModelConfig, ModelParams};
pub use tensor::{Real, Tensor};
