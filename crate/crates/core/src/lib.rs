pub mod config;
pub mod data;
pub mod decode;
pub mod engine;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod taskmask;

pub use error::{Error, Result};
