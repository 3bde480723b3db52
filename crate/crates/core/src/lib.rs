pub mod alignment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod numkit;
pub mod providers;
pub mod report;
pub mod rng;
pub mod scene_graph;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
