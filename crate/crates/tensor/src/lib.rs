//! Dense tensors with a small reverse-mode tape.
//!
//! Spatial tensors are always rank 5, laid out `[N, C, D, H, W]` in C order.
//! Planar data uses `D = 1` with `(1, k, k)` kernels, so a single convolution
//! kernel serves both the 2D and 3D networks.
//!
//! The tape is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] that the [`Graph`] borrows immutably; gradients come back as a
//! [`Gradients`] map and are applied by an optimizer such as [`Adam`].

mod conv;
mod error;
mod float;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use conv::{ConvSpec, PadMode};
pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
