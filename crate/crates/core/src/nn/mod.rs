//! Minimal reverse-mode autodiff and the layers both networks are built from.

pub mod conv;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod spectral;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
