//! Dense tensors, reverse-mode gradients, Adam, and finite-difference checks.

mod adam;
mod gradcheck;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use adam::{AdamState, OptimConfig};
pub use gradcheck::{finite_diff_check, finite_diff_check_frozen, GradCheckReport, FD_STEP};
pub use params::{ParamStore, Segment, SegmentId};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("structural error at node {node} ({op}): {msg}")]
    Structure { node: usize, op: String, msg: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: String },
    #[error("duplicate parameter segment '{0}'")]
    DuplicateSegment(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
