//! Tokenwise ranking models for click-through prediction.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod featurizer;
pub mod gemm;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod token_boost;
pub mod token_fusion;

pub use error::{Error, Result};
pub use gemm::{grouped_matmul, matmul};
pub use params::{Initializer, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
