pub mod arrays;
pub mod baselines;
pub mod channel;
pub mod conformal;
pub mod error;
pub mod exec;
pub mod filter;
pub mod harness;
pub mod predictor;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Exec;
