//! Singular-value fine-tuning (SVFit) and its baselines, built on a
//! deterministic one-sided Jacobi SVD.
//!
//! The numeric core ([`matrix`], [`linalg`], [`adapt`], [`optim`],
//! [`model`]) is generic over [`Scalar`] (`f32` or `f64`). The aliases below
//! fix it to `f64`, which is what the file formats and experiment drivers use.

pub mod adapt;
pub mod error;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tasks;

pub use adapt::Method;
pub use error::{Error, Result};
pub use linalg::EnergyRatio;
pub use matrix::DenseMatrix;
pub use scalar::Scalar;

pub type Matrix = DenseMatrix<f64>;
pub type Matrix32 = DenseMatrix<f32>;
pub type SvdFactors = linalg::SvdFactors<f64>;
pub type FundamentalSubspaces = linalg::FundamentalSubspaces<f64>;
pub type AdapterLayer = adapt::AdapterLayer<f64>;
pub type LayerGradients = adapt::LayerGradients<f64>;
pub type ToyBlockStack = model::ToyBlockStack<f64>;
pub type OptimState = optim::OptimState<f64>;
