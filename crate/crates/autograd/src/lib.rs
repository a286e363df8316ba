//! A small define-by-run reverse-mode differentiation engine over dense
//! row-major `f64` matrices, with the fused ops a toy transformer needs and
//! an Adam optimiser.

mod adam;
mod matrix;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamSlot, AdamState, InverseSqrtSchedule};
pub use matrix::{log_sum_exp, Matrix};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{conv_out_len, Tape, Var};
