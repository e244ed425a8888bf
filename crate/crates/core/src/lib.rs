//! Temporal action localization toolkit.

pub mod bmn;
pub mod cascade;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod layers;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod postprocess;
pub mod sparse;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
