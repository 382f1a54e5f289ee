//! Reverse-mode differentiation over the closed set of operations the losses use.

mod dual;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use dual::Dual;
pub use gradcheck::{relative_error, GradCheck};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use tape::{Fault, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{huber_value, log_sum_exp};
