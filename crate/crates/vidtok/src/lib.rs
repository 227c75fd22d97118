//! Coordinate-queried triplane video tokenizer.
//!
//! A video is encoded into three 2D latent planes (space-space plus two
//! space-time planes). The decoder maps patch-center coordinates, looked up
//! from the planes by bilinear interpolation, back to patch pixels. Training
//! reconstructs only a random subset of patch coordinates per step, which
//! keeps decoder-side memory independent of clip length.
//!
//! All numeric code is generic over the scalar type ([`scalar::Scalar`]):
//! `f32` for training, `f64` for finite-difference gradient checking.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};

/// Scalar type used for training and inference.
pub type Real = f32;
/// Scalar type used for gradient checking.
pub type CheckReal = f64;

/// Dense tensor over the training scalar.
pub type Tensor32 = diffcore::Tensor<f32>;
/// Dense tensor over the checking scalar.
pub type Tensor64 = diffcore::Tensor<f64>;
/// Differentiation graph over the training scalar.
pub type Graph32 = diffcore::Graph<f32>;
/// Differentiation graph over the checking scalar.
pub type Graph64 = diffcore::Graph<f64>;
