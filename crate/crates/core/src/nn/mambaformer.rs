//! Convolution + self-attention encoder layer.
//!
//! Pre-norm layout, per layer:
//!
//! ```text
//! u = x + dropout(act(conv1d_same(ln1(x))))
//! y = u + dropout(mha(ln2(u), ln2(u), ln2(u)))
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dropout, mha, Activation, Forward, LayerNormParams, MhaParams};
use crate::autodiff::{ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaFormerLayer {
    pub kernel_size: usize,
    /// `[k, D, D]`, tap-major; tap `j` is applied as `W_j x`.
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub attn: MhaParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub activation: Activation,
}

impl MambaFormerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        kernel_size: usize,
        activation: Activation,
        mha_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "convolution kernel size must be odd, got {kernel_size}"
            )));
        }
        let bound = (1.0 / (kernel_size * dim) as f64).sqrt();
        let conv_kernel = store.add(
            format!("{name}.conv.kernel"),
            Tensor::uniform(&[kernel_size, dim, dim], bound, rng),
        );
        let conv_bias = store.add(
            format!("{name}.conv.bias"),
            Tensor::uniform(&[dim], bound, rng),
        );
        let attn = MhaParams::init(store, &format!("{name}.attn"), dim, heads, mha_bias, rng)?;
        Ok(MambaFormerLayer {
            kernel_size,
            conv_kernel,
            conv_bias,
            attn,
            ln1: LayerNormParams::init(store, &format!("{name}.ln1"), dim),
            ln2: LayerNormParams::init(store, &format!("{name}.ln2"), dim),
            activation,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(f, x)?;
        let (k, b) = (f.bind.var(self.conv_kernel), f.bind.var(self.conv_bias));
        let c = f.tape.conv1d_same(h, k, b)?;
        let c = self.activation.apply(f, c);
        let c = dropout(f.dropout, f.tape, c, f.rng.as_deref_mut())?;
        let u = f.tape.add(x, c)?;

        let h2 = self.ln2.forward(f, u)?;
        let a = mha(f, &self.attn, h2, h2, h2)?.out;
        let a = dropout(f.dropout, f.tape, a, f.rng.as_deref_mut())?;
        f.tape.add(u, a)
    }
}

/// Runs `x [B, L, D]` through every layer in order; an empty stack is the identity.
pub fn mambaformer_encode(f: &mut Forward<'_>, layers: &[MambaFormerLayer], x: Var) -> Result<Var> {
    layers.iter().try_fold(x, |h, layer| layer.forward(f, h))
}
