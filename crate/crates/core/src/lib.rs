pub mod error;
pub mod experiment;
pub mod io;
pub mod fbsde;
pub mod lab;
pub mod flow;
pub mod noise;
pub mod sigma;
pub mod spde;
pub mod stats;
pub mod torus;

pub use error::{Error, Result};
