//! Desk-scale video semantic segmentation with static/dynamic semantic
//! alignment, windowed sparse cross-frame attention and multivariate class
//! prototype losses.
//!
//! The crate carries its own small reverse-mode differentiation engine
//! ([`graph`]) over dense 64-bit tensors ([`tensor`]).

pub mod backbone;
pub mod bench;
pub mod config;
pub mod datagen;
pub mod dssa;
pub mod error;
pub mod eval;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod ssea;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Scope, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
