//! Minimal dense-array engine with reverse-mode gradients.

mod array;
mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;

pub use array::Array;
pub use checkpoint::{ParamStore, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, rel_error, GradCheckReport};
pub use graph::{CustomBackward, Gradients, Graph, Var};
