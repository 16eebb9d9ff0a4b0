//! Active speaker detection with long-term intra-speaker attention and
//! short-term inter-speaker mixing, trained on synthetic conversations.

pub mod audio;
pub mod config;
pub mod conversim;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod lscm;
pub mod metrics;
pub mod model;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{LoCoNet, ModelConfig};
