pub mod analysis;
pub mod archspace;
pub mod elastic_net;
pub mod error;
pub mod linas;
pub mod nsga2;
pub mod predictor;
pub mod quant;
pub mod rng;
pub mod store;
pub mod tasks;

pub use error::{NasError, Result};
