//! Core numerics for Kolmogorov–Arnold attention: a small reverse-mode
//! tensor engine, learnable unit families, simplex projection, the KArAt
//! operator layouts and a compact vision transformer.

pub mod attention;
pub mod basis;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod simplex;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{KaratError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
