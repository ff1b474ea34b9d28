//! Window-level pruning for windowed vision transformers: an autodiff
//! engine, the model, sparsity-aware training, latency-constrained
//! evolutionary search over per-block window sparsity, and tooling.

pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod search;
pub mod sparsity;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use sparsity::SparsityConfig;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
