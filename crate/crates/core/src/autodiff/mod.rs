//! Minimal reverse-mode differentiable tensor core.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] runs the reverse
//! pass. Parameters live in a [`ParamStore`] and are copied onto the tape for
//! each forward pass, so read-only snapshots can be shared between workers.

mod backward;
pub mod gradcheck;
mod params;
mod scatter;
mod tape;
mod tensor;

pub use params::{AdamConfig, ParamId, ParamStore, TrainingError};
pub use scatter::{Accumulation, ScatterPlan};
pub use tape::{Conv2dSpec, OpKind, Tape, Var};
pub use tensor::{numel, Tensor};
