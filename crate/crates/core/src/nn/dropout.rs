use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p: f64,
    pub mode: DropoutMode,
}

impl DropoutConfig {
    pub fn train(p: f64) -> Self {
        DropoutConfig {
            p,
            mode: DropoutMode::Train,
        }
    }

    pub fn eval() -> Self {
        DropoutConfig {
            p: 0.0,
            mode: DropoutMode::Eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {}",
                self.p
            )));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.mode == DropoutMode::Train && self.p > 0.0
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
///
/// Returns `x` itself (no new node) in eval mode or when `p == 0`.
pub fn dropout<R: Rng + ?Sized>(
    cfg: DropoutConfig,
    tape: &mut Tape,
    x: Var,
    rng: Option<&mut R>,
) -> Result<Var> {
    cfg.validate()?;
    if !cfg.is_active() {
        return Ok(x);
    }
    let rng = rng.ok_or_else(|| {
        Error::InvalidArgument("train-mode dropout requires a random generator".into())
    })?;
    let keep = 1.0 - cfg.p;
    let scale = 1.0 / keep;
    let shape = tape.shape(x).to_vec();
    let numel = shape.iter().product();
    let mask: Vec<f64> = (0..numel)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}
