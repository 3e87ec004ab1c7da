//! Density-aware vision transformer for dense rotated-target detection.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`graph`]), rotated-box geometry, density-map construction ([`dam`]), a
//! convolutional feature pyramid ([`cnn`]), the transformer backbone with
//! density-gated token focusing ([`vit`], [`defm`]), an anchor-free rotated-box
//! head with loss and evaluation ([`detect`]), and a synthetic dataset layer
//! ([`data`]).

pub mod cnn;
pub mod dam;
pub mod data;
pub mod defm;
pub mod detect;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod suite;
pub mod tensor;
pub mod tnsr;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};

/// Which branch of the mask and focus pipeline to run. Training consumes
/// ground-truth density maps; inference never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inferring,
}
