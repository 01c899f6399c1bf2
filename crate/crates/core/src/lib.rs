//! Desk-scale transformer pretraining lab for gradient-preserving activation
//! scaling (GPAS) across residual normalization schemes.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod instrument;
pub mod layers;
pub mod schemes;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
