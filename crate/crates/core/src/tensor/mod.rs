//! Dense tensors and a minimal reverse-mode autodiff tape.

mod array;
mod gradcheck;
mod graph;

pub use array::Tensor;
pub use gradcheck::{finite_difference_check, finite_difference_check_multi};
pub use graph::{Elementwise, Graph, Var, LAYER_NORM_EPS, MIN_ROW_NORM};
