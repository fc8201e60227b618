//! Race-aware face aging: an age encoder and a race-aware face encoder whose
//! style codes are blended and rendered by a style-based generator, trained
//! with a cycle-reconstruction loop, plus dataset tooling and an evaluation
//! harness for race fidelity, identity, age accuracy and kinship verification.
//!
//! Everything numeric is generic over [`ragan_tensor::Scalar`]; `f32` is the
//! training precision and `f64` backs the gradient checks.

pub mod backbones;
pub mod config;
pub mod datakit;
pub mod domain;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synthesis;
pub mod training;
pub mod weights;

pub use ragan_tensor as tensor;

pub use config::Config;
pub use domain::{AgeValue, ImageTensor, LossWeights, OptimizerConfig, RaceLabel, StyleCodeMatrix};
pub use error::{RaganError, Result};
pub use losses::LossBreakdown;
pub use model::{RaGan, RaGan32, RaGan64};

pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
pub type Codes32 = StyleCodeMatrix<f32>;
pub type Codes64 = StyleCodeMatrix<f64>;
