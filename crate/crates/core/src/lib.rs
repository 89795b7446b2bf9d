//! Expert evolution and dynamic token-aware routing for small causal
//! mixture-of-experts transformers, with a three-stage training pipeline and
//! routing diagnostics. Everything runs in `f64` on the CPU.

pub mod autograd;
pub mod diagnostics;
pub mod error;
pub mod evolution;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod router;
pub mod tensor;

pub use error::{EvoError, Result};
pub use model::batch::{Modality, TokenBatch};
pub use model::config::{ModelConfig, MoePlacement, RouterKind};
pub use model::{Architecture, Model};
pub use tensor::Tensor;
