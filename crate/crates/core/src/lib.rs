pub mod attacks;
pub mod container;
pub mod correspondence;
pub mod datasets;
pub mod digest;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod query;

pub use error::{Error, Result};
