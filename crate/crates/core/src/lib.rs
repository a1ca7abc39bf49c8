//! Recurrent encoder-decoder for predicting sets of binary attributes as
//! ordered sequences from per-image region features.
//!
//! The core is generic over the scalar type; the `f64` aliases at the crate
//! root are what training and the command line use.

pub mod attention;
pub mod cell;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod tensor;
pub mod train;

pub use error::{JrlError, Result};
pub use numerics::{Matrix, Scalar, SeededRng, Vector};
pub use tensor::ParamSet;

pub type Vec64 = numerics::Vector<f64>;
pub type Mat64 = numerics::Matrix<f64>;
pub type Model = model::JrlModel<f64>;
pub type Params = model::JrlParams<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Sample = data::Sample<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
