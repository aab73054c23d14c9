use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Forward;
use crate::autodiff::{ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, f: &mut Forward<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => f.tape.relu(x),
            Activation::Gelu => f.tape.gelu(x),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

/// Affine map `x Wᵀ + b` with `W [out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    /// Uniform init in `(-s, s)` with `s = sqrt(1 / in)`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_dim, in_dim], bound, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::uniform(&[out_dim], bound, rng)));
        LinearParams {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.bind.var(self.w);
        let b = self.b.map(|b| f.bind.var(b));
        f.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (g, b) = (f.bind.var(self.gamma), f.bind.var(self.beta));
        f.tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;

    fn single_linear(w: Tensor, b: Tensor) -> (ParamStore, LinearParams) {
        let mut store = ParamStore::new();
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let lp = LinearParams {
            w: store.add("w", w),
            b: Some(store.add("b", b)),
            in_dim,
            out_dim,
        };
        (store, lp)
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let (store, lp) = single_linear(Tensor::eye(3), Tensor::zeros(&[3]));
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap());
        let mut f = Forward::eval(&mut tape, &bind);
        let y = lp.forward(&mut f, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn dot_plus_bias() {
        let (store, lp) = single_linear(
            Tensor::new(vec![1, 2], vec![1., 1.]).unwrap(),
            Tensor::new(vec![1], vec![0.5]).unwrap(),
        );
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![2], vec![2., 3.]).unwrap());
        let mut f = Forward::eval(&mut tape, &bind);
        let y = lp.forward(&mut f, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.5]);
    }

    #[test]
    fn input_width_mismatch_is_rejected() {
        let (store, lp) = single_linear(Tensor::eye(3), Tensor::zeros(&[3]));
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let mut f = Forward::eval(&mut tape, &bind);
        assert!(matches!(lp.forward(&mut f, x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = super::super::ModelRng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lp = LinearParams::init(&mut store, "l", 16, 4, true, &mut rng);
        let s = 0.25;
        assert!(store.get(lp.w).data().iter().all(|v| v.abs() <= s));
        assert_eq!(store.get(lp.w).shape(), &[4, 16]);
        assert_eq!(store.get(lp.b.unwrap()).shape(), &[4]);
    }

    #[test]
    fn activation_parses() {
        assert_eq!("ReLU".parse::<Activation>().unwrap(), Activation::Relu);
        assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
        assert!("tanh".parse::<Activation>().is_err());
    }
}
