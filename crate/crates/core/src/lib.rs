//! Deep-BSDE solver for high-dimensional parabolic PDEs with dense and
//! tensor-network (two-core MPO) layers.
//!
//! The solution `u(t, x)` is parameterized by a small network. Brownian paths
//! of the forward state are rolled out with Euler-Maruyama, `Y = u(t, X)` and
//! `Z = grad_x u(t, X)` come from the network (the latter by reverse-mode
//! differentiation that stays differentiable), and the discretized backward
//! equation's residuals form the training loss.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fbsde;
pub mod nn;
pub mod problems;
pub mod tensor;
pub mod training;

pub use autodiff::{ExprGraph, GradientMap, OpKind, VarRef};
pub use error::{Error, Result};
pub use nn::{Activation, ArchKind, ArchitectureSpec, DenseLayer, InitScheme, Layer, Network, TnLayer};
pub use tensor::{GaussianRng, Shape, Tensor};
