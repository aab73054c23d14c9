//! Multi-head scaled dot-product attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Forward, LinearParams};
use crate::autodiff::{ParamStore, Var};
use crate::error::{Error, Result};

/// Projections `W_Q, W_K, W_V, W_O`, each `[D, D]`.
///
/// The head count is not baked into the weights, so the same parameters can
/// run with a reduced head count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhaParams {
    pub heads: usize,
    pub dim: usize,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
}

impl MhaParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(MhaParams {
            heads,
            dim,
            wq: LinearParams::init(store, &format!("{name}.q"), dim, dim, bias, rng),
            wk: LinearParams::init(store, &format!("{name}.k"), dim, dim, bias, rng),
            wv: LinearParams::init(store, &format!("{name}.v"), dim, dim, bias, rng),
            wo: LinearParams::init(store, &format!("{name}.o"), dim, dim, bias, rng),
        })
    }

    pub fn with_heads(&self, heads: usize) -> Result<Self> {
        check_heads(self.dim, heads)?;
        Ok(MhaParams {
            heads,
            ..self.clone()
        })
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct MhaOutput {
    /// `[B, Lq, D]`
    pub out: Var,
    /// Attention weights `[B, heads, Lq, Lk]`.
    pub attn: Var,
}

/// `q [B, Lq, D]` attends over `k, v [B, Lk, D]`.
pub fn mha(f: &mut Forward<'_>, p: &MhaParams, q: Var, k: Var, v: Var) -> Result<MhaOutput> {
    let (qs, ks, vs) = (
        f.tape.shape(q).to_vec(),
        f.tape.shape(k).to_vec(),
        f.tape.shape(v).to_vec(),
    );
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::InvalidShape {
            op: "mha",
            shape: qs,
            reason: "query, key and value must be [B, L, D]".into(),
        });
    }
    if qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != p.dim || ks[2] != p.dim || vs[2] != p.dim {
        return Err(Error::ShapeMismatch {
            op: "mha",
            lhs: qs,
            rhs: ks,
        });
    }
    if ks[1] != vs[1] {
        return Err(Error::ShapeMismatch {
            op: "mha key/value",
            lhs: ks,
            rhs: vs,
        });
    }
    if ks[1] == 0 {
        return Err(Error::InvalidArgument("attention over an empty key set".into()));
    }
    check_heads(p.dim, p.heads)?;
    let (b, lq, lk) = (qs[0], qs[1], ks[1]);
    let dh = p.dim / p.heads;

    let qp = p.wq.forward(f, q)?;
    let kp = p.wk.forward(f, k)?;
    let vp = p.wv.forward(f, v)?;
    let qh = f.tape.split_heads(qp, p.heads)?;
    let kh = f.tape.split_heads(kp, p.heads)?;
    let vh = f.tape.split_heads(vp, p.heads)?;

    let kt = f.tape.transpose_last2(kh)?;
    let scores = f.tape.batch_matmul(qh, kt)?;
    let scores = f.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = f.tape.softmax(scores, 2)?;
    let ctx = f.tape.batch_matmul(weights, vh)?;
    let merged = f.tape.merge_heads(ctx, p.heads)?;
    let out = p.wo.forward(f, merged)?;
    let attn = f.tape.reshape(weights, &[b, p.heads, lq, lk])?;
    Ok(MhaOutput { out, attn })
}
