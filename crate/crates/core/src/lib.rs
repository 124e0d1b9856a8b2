//! Set learning with featurewise sort pooling.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]),
//! the sort operators ([`sortops`]), FSPool / FSUnpool ([`fspool`]), set
//! losses ([`losses`]), the set autoencoder and its baselines ([`models`]),
//! dataset generation ([`data`]), training and evaluation loops
//! ([`train`]) and the rotation sweep that exposes the responsibility
//! problem of fixed-order set decoders ([`probe`]).

pub mod autodiff;
pub mod checks;
pub mod data;
mod error;
pub mod exec;
pub mod fspool;
pub mod losses;
pub mod models;
pub mod probe;
pub mod sortops;
pub mod svg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
