//! Long-horizon probabilistic forecasting from multiscale contrastive
//! representations fused with a recurrent context through attention, with
//! predictive densities from conditional affine-coupling flows.

pub mod artifact;
pub mod augmentation;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod forecaster;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
