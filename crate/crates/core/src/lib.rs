//! Ensemble Kalman filtering for a stochastic spatial epidemic model.
//!
//! Four analysis variants are provided: the standard EnKF, the FFT EnKF
//! (diagonal covariance in the sine-transform domain), and both of them
//! applied in the morphing representation, which separates position from
//! amplitude. The [`assimilation`] module runs twin experiments with the
//! S-I-R cell model in [`sir`].
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix `f64`, which is what the experiment driver uses.

// `!(x > 0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assimilation;
pub mod config;
pub mod enkf;
pub mod error;
pub mod fft_enkf;
pub mod grid;
pub mod io;
mod linalg;
pub mod morphing;
pub mod rng;
mod scalar;
pub mod sir;
pub mod spectral;

pub use error::{Error, Result};
pub use rng::RandomStream;
pub use scalar::Real;

pub type Grid = grid::Grid<f64>;
pub type FieldBlock = grid::FieldBlock<f64>;
pub type ModelState = grid::ModelState<f64>;
pub type Ensemble = grid::Ensemble<ModelState>;
pub type SpectralField = spectral::SpectralField<f64>;
pub type SmoothnessSpec = spectral::SmoothnessSpec<f64>;
pub type EpiParams = sir::EpiParams<f64>;
pub type ObsSpec = enkf::ObsSpec<f64>;
pub type WarpMapping = morphing::WarpMapping<f64>;
pub type MorphState = morphing::MorphState<f64>;
pub type RegistrationOptions = morphing::RegistrationOptions<f64>;
