//! Grouped shifted-window attention super-resolution: a small tensor engine
//! with reverse-mode differentiation, the network built on it, and the
//! training, evaluation and memory-accounting tools around it.

pub mod autodiff;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod gswa;
pub mod imageio;
pub mod memcost;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod windowing;

pub use autodiff::{Eager, Graph, Tape, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{Initializer, ParamId, ParamStore};
pub use tensor::{memtrack, Element, Tensor};
