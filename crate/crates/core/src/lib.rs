pub mod aggregate;
pub mod cli;
pub mod dist;
pub mod effectsize;
pub mod ensemble;
pub mod error;
pub mod ingest;
pub mod inference;
pub mod measures;
pub mod optimize;
pub mod quadrature;
pub mod rng;
pub mod simgen;
pub mod remeta;

pub use error::{Error, Result};
