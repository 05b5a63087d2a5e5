pub mod adversary;
pub mod belief;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod gaussian;
mod linalg;
pub mod mixture;
pub mod nn;
pub mod platoon;
pub mod policy;
pub mod quadrature;
pub mod rollout;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
