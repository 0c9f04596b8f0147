//! Gaussian neural processes with exact GP oracles, a ConvCNP baseline,
//! maximum-likelihood meta-training and Gaussian divergence diagnostics.

pub mod divergence;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod models;
pub mod selftest;
pub mod taskgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
