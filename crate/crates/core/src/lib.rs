//! FINO change detection at desk scale: synthetic bitemporal data, the
//! network, its losses, training and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{FinoError, Result};
