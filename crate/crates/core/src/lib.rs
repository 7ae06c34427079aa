//! Stochastic video prediction: a residual convolutional autoencoder around
//! LSTM latent dynamics, trained on a variational bound, with augmentation,
//! rollout, evaluation metrics, a synthetic pushing environment and a
//! sampling-based planner.

pub mod augment;
pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod planner;
pub mod pusher;
pub mod rollout;
pub mod runner;
pub mod train;

pub use config::{count_parameters, validate_config, ModelConfig, Violation};
pub use error::{Error, Result};
pub use fitvid_tensor as tensor;
pub use model::FitVid;
