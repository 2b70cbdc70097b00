//! A small reverse-mode tensor engine.
//!
//! Only the operations needed by attention-based set/graph models are
//! provided: dense and batched matrix products, elementwise maps,
//! reductions along an axis, softmax, layer normalization, dropout,
//! row gathers and the two classification losses. Every operation records
//! itself on a [`Graph`] tape; [`Graph::backward`] walks the tape in reverse.
//!
//! Values are generic over [`Scalar`] so the same model code runs in
//! binary32 for training and binary64 for finite-difference checks.

mod error;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;
