//! Deterministic equivalents, outlier predictions and Monte Carlo checks for
//! MANOVA-type covariance estimators `Σ̂ = YᵀBY` in high-dimensional linear
//! mixed models `Y = Σ_r U_r α_r`.

pub mod asymptotic;
pub mod config;
pub mod eigenvector;
pub mod error;
pub mod fixed_point;
mod linalg;
pub mod model;
pub mod montecarlo;
pub mod outlier;
pub mod spectrum;

pub use error::{Error, Result};

pub type C64 = nalgebra::Complex<f64>;
