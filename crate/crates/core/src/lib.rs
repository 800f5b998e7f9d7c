pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod grad;
pub mod model;
pub mod qcircuits;
pub mod rng;
pub mod smiles;
pub mod statevec;
pub mod train;

pub use error::{Error, Result};
