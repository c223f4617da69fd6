//! Minimal CPU neural-network kernel: convolutional blocks, manual
//! back-propagation, Adam, and a native weight format.

pub mod arch;
pub mod network;
pub mod ops;
pub mod optim;
pub mod serialize;

pub use network::{Forward, LayerId, Network, Normalization, Op, ParamGrads, Tape};
