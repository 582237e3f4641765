//! Dual-channel news headline classification engine.
//!
//! ```text
//! token ids → input embedding → encoder (multi-head self-attention)
//!     ├── BiLSTM → attention pooling ──┐
//!     └── DPCNN ───────────────────────┴── concat → dropout → affine → logits
//! ```
//!
//! Everything is built on a small reverse-mode autodiff engine ([`tensor`]):
//! the layer math ([`layers`]), the model zoo ([`model`]), the character-level
//! data pipeline ([`data`]) and the training loop with metrics ([`train`]).
//! All math runs in f64 so analytic gradients can be checked against central
//! differences ([`tensor::grad_check`]).

pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use tensor::{grad_check, Mode, Tape, Tensor, TensorId};

pub type Result<T> = std::result::Result<T, CoreError>;
