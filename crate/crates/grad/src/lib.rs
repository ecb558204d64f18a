//! CPU f64 tensors with a rebuild-per-step reverse-mode tape, named
//! parameter storage with Adam, finite-difference gradient checking, and a
//! simple single-file tensor container format.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod store;
pub mod tensor;

pub use graph::{Grads, Graph, NodeId};
pub use params::{Adam, ModelGraph, ParamStore, PrefixFilter};
pub use store::{read_container, write_container, Container, DType};
pub use tensor::Tensor;
