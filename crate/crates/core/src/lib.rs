//! Token-importance-aware multi-modal fusion attention.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod synth;
pub mod tensor;

pub use autodiff::{finite_diff_check, Component, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
