//! Learned similarity functions for forward-looking sonar patch pairs.

pub mod architectures;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod losses;
pub mod netgraph;
pub mod seeds;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
