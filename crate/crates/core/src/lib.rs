//! Amplitude-equation reduction for SPDEs with a one-dimensional kernel and
//! a quadratic nonlinearity, in a diagonal spectral basis.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amplitude;
pub mod analysis;
pub mod burgers;
pub mod coeffs;
pub mod config;
pub mod error;
pub mod noise;
pub mod report;
pub mod spde;
pub mod spectral;
pub mod tensor;
pub mod validation;

pub use coeffs::{
    compute_coefficients, noise_interaction, AmplitudeCoefficients, NoiseInteraction,
};
pub use error::{Error, Result};
pub use spectral::{ModelSpec, SpectralField};
pub use tensor::BilinearTensor;
pub use validation::ValidationReport;
