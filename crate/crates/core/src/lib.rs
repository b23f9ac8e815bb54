//! Low-dose PET recovery with a classification-guided, refinement-augmented
//! 3D GAN.
//!
//! The crate is self-contained: [`tensor`] is a small reverse-mode autodiff
//! engine with volumetric convolutions, [`nets`] builds the coarse
//! generator (a 3D U-Net with a dose-level classification head), the
//! residual refiner, the patch discriminator and a fixed feature extractor,
//! [`losses`] composes the five training objectives, [`dosesim`] produces
//! synthetic phantom datasets, [`trainer`] runs optimization and ablations,
//! and [`metrics`] scores reconstructions.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dosesim;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Rng, Tensor, Var};
