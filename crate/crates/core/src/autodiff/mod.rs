//! Reverse-mode differentiation over dense tensors.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{gradcheck, rel_error, GradcheckEntry, GradcheckReport};
pub use params::{Binding, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
