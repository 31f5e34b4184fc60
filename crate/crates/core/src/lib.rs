//! Data assimilation with diffusion-forcing style scheduling, plus classical baselines.

pub mod classical;
pub mod denoise;
pub mod dynamics;
pub mod error;
pub mod fdt;
pub mod linalg;
pub mod metrics;
pub mod observe;
pub mod pca;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
