//! Meta-learned initialisations for few-shot cross-subject classification of
//! multichannel signal epochs.
//!
//! The numerical core is generic over the scalar type ([`Real`], implemented
//! for `f32` and `f64`); the aliases below fix it to `f64`, which everything
//! above the model engine uses.

pub mod data;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod hyperopt;
pub mod meta;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod taskgen;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Params = nn::ParamVector<f64>;
pub type Params32 = nn::ParamVector<f32>;
pub type Optimizer = nn::OptimizerState<f64>;
pub type MetaState = meta::MetaState<f64>;
pub type Batch = nn::Batch<f64>;
