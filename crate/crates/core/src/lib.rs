//! Desk-scale laboratory for CNN/S4D sequence classifiers and the spectral
//! interpretation of their learned kernels.

pub mod error;
pub mod numeric;
pub mod blocks;
pub mod s4d;
pub mod corpus;
pub mod train;
pub mod analysis;
pub mod check;

pub use error::{Error, Result};
