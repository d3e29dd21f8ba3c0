//! Random spatial forests: bagged regression trees whose splits are chosen
//! under a spatially correlated generalized-least-squares loss, together with
//! the usual comparison methods and a simulation harness.

pub mod archive;
pub mod baselines;
pub mod bench;
pub mod cli;
pub mod cv;
pub mod data;
pub mod error;
pub mod forest;
pub mod geometry;
pub mod gls;
pub mod io;
pub mod model;
pub mod rng;
pub mod simulation;
pub mod tree;

pub use data::LocatedDataset;
pub use error::{Result, SpatialError};
