pub mod cohomology;
pub mod conjugacy;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod fourier;
pub mod model;
pub mod poly;
pub mod quadrature;
pub mod stats;

pub use error::{Error, Result};
