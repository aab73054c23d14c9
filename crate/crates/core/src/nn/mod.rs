//! Parameterized building blocks shared by the fusion stages.

mod attention;
mod dropout;
mod layers;
mod mambaformer;

pub use attention::{mha, MhaOutput, MhaParams};
pub use dropout::{dropout, DropoutConfig, DropoutMode};
pub use layers::{Activation, LayerNormParams, LinearParams, LN_EPS};
pub use mambaformer::{mambaformer_encode, MambaFormerLayer};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, Tape};

/// Seeded generator used for initialization, shuffling and dropout masks.
pub type ModelRng = ChaCha8Rng;

/// State threaded through one forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub bind: &'a Binding,
    pub dropout: DropoutConfig,
    /// Required when `dropout` is in train mode with `p > 0`.
    pub rng: Option<&'a mut ModelRng>,
}

impl<'a> Forward<'a> {
    /// Deterministic forward pass with dropout disabled.
    pub fn eval(tape: &'a mut Tape, bind: &'a Binding) -> Self {
        Forward {
            tape,
            bind,
            dropout: DropoutConfig::eval(),
            rng: None,
        }
    }
}
