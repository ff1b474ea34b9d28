//! The windowed vision transformer.

pub mod config;
pub mod counts;
pub mod forward;
pub mod params;
pub mod window;

pub use config::{ModelConfig, StageConfig};
pub use counts::ExecutionCounts;
pub use forward::{bind_params, forward_batch, BatchForward, ForwardTrace, Model, StageTrace};
pub use params::ModelParams;
