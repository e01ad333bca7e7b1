//! Physics-disentangled precipitation nowcasting.
//!
//! The model splits latent dynamics into a physical branch (a recurrent cell
//! whose prediction step is a learned combination of moment-constrained
//! spatial differential operators, corrected by a Kalman-style gate) and a
//! residual ConvLSTM branch; both are trained end-to-end together with a
//! convolutional encoder/decoder pair on radar intensity sequences.
//!
//! Everything numeric is generic over the scalar type ([`scalar::Scalar`]:
//! f32 or f64); the concrete aliases below pin the two supported choices.

pub mod autodiff;
pub mod data;
pub mod derivative_ops;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod phycell;
pub mod phydnet;
pub mod residual_convlstm;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default wire-format model: parameters are stored as little-endian f32.
pub type PhyDNet32 = phydnet::PhyDNet<f32>;
/// Double-precision model, used by the gradient checks and oracles.
pub type PhyDNet64 = phydnet::PhyDNet<f64>;

pub type RadarFrame32 = data::RadarFrame<f32>;
pub type RadarFrame64 = data::RadarFrame<f64>;
