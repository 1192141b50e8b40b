//! Simulator and analysis toolkit for three-tier (worker, edge, cloud)
//! federated learning with Nesterov momentum at workers and edges.

pub mod analysis;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod models;
pub mod planner;
pub mod rng;
pub mod timeline;
pub mod vector;

pub use error::{Error, Result};
pub use vector::ModelVector;
