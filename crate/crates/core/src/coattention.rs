//! Shared-space projection and bidirectional co-attention with
//! dimension-wise gating.
//!
//! ```text
//! A_t2i = MHA(Q = T_seq, K = I_seq, V = I_seq)
//! A_i2t = MHA(Q = I_seq, K = T_seq, V = T_seq)
//! G_t   = sigmoid(W_gt A_t2i + b_gt),   T~ = G_t * A_t2i
//! G_i   = sigmoid(W_gi A_i2t + b_gi),   I~ = G_i * A_i2t
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::AblationFlags;
use crate::autodiff::{ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{mha, Forward, LinearParams, MhaParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub text: LinearParams,
    pub image: LinearParams,
}

impl ProjectionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        text_dim: usize,
        image_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        ProjectionParams {
            text: LinearParams::init(store, "proj.text", text_dim, dim, true, rng),
            image: LinearParams::init(store, "proj.image", image_dim, dim, true, rng),
        }
    }
}

/// Projects pooled features `[B, D_text]`, `[B, D_img]` into the shared space
/// as length-1 sequences `[B, 1, D]`.
pub fn project(
    f: &mut Forward<'_>,
    params: &ProjectionParams,
    text_feat: Var,
    img_feat: Var,
) -> Result<(Var, Var)> {
    let (ts, is) = (f.tape.shape(text_feat).to_vec(), f.tape.shape(img_feat).to_vec());
    if ts.len() != 2 || ts[1] != params.text.in_dim {
        return Err(Error::ShapeMismatch {
            op: "project text",
            lhs: ts,
            rhs: vec![params.text.in_dim],
        });
    }
    if is.len() != 2 || is[1] != params.image.in_dim || is[0] != ts[0] {
        return Err(Error::ShapeMismatch {
            op: "project image",
            lhs: is,
            rhs: vec![ts[0], params.image.in_dim],
        });
    }
    let b = ts[0];
    let t = params.text.forward(f, text_feat)?;
    let i = params.image.forward(f, img_feat)?;
    let t = f.tape.reshape(t, &[b, 1, params.text.out_dim])?;
    let i = f.tape.reshape(i, &[b, 1, params.image.out_dim])?;
    Ok((t, i))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoAttenParams {
    pub attn_t2i: MhaParams,
    pub attn_i2t: MhaParams,
    pub gate_t: LinearParams,
    pub gate_i: LinearParams,
}

impl CoAttenParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        mha_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CoAttenParams {
            attn_t2i: MhaParams::init(store, "coattn.t2i", dim, heads, mha_bias, rng)?,
            attn_i2t: MhaParams::init(store, "coattn.i2t", dim, heads, mha_bias, rng)?,
            gate_t: LinearParams::init(store, "gate.text", dim, dim, true, rng),
            gate_i: LinearParams::init(store, "gate.image", dim, dim, true, rng),
        })
    }
}

/// Intermediates of the co-attention stage. Gates and attention weights are
/// absent when the corresponding component is ablated.
#[derive(Clone, Copy, Debug)]
pub struct GatedFeatures {
    pub a_t2i: Var,
    pub a_i2t: Var,
    pub g_t: Option<Var>,
    pub g_i: Option<Var>,
    pub t_gated: Var,
    pub i_gated: Var,
    pub attn_t2i_w: Option<Var>,
    pub attn_i2t_w: Option<Var>,
}

pub fn coattend(
    f: &mut Forward<'_>,
    params: &CoAttenParams,
    t_seq: Var,
    i_seq: Var,
    flags: &AblationFlags,
) -> Result<GatedFeatures> {
    let (ts, is) = (f.tape.shape(t_seq), f.tape.shape(i_seq));
    if ts != is {
        return Err(Error::ShapeMismatch {
            op: "coattend",
            lhs: ts.to_vec(),
            rhs: is.to_vec(),
        });
    }

    let (a_t2i, a_i2t, attn_t2i_w, attn_i2t_w) = if flags.no_ca {
        (t_seq, i_seq, None, None)
    } else {
        let t2i = mha(f, &params.attn_t2i, t_seq, i_seq, i_seq)?;
        let i2t = mha(f, &params.attn_i2t, i_seq, t_seq, t_seq)?;
        (t2i.out, i2t.out, Some(t2i.attn), Some(i2t.attn))
    };

    if flags.no_ff {
        return Ok(GatedFeatures {
            a_t2i,
            a_i2t,
            g_t: None,
            g_i: None,
            t_gated: a_t2i,
            i_gated: a_i2t,
            attn_t2i_w,
            attn_i2t_w,
        });
    }

    let pre_t = params.gate_t.forward(f, a_t2i)?;
    let g_t = f.tape.sigmoid(pre_t);
    let t_gated = f.tape.mul(g_t, a_t2i)?;

    let pre_i = params.gate_i.forward(f, a_i2t)?;
    let g_i = f.tape.sigmoid(pre_i);
    let i_gated = f.tape.mul(g_i, a_i2t)?;

    Ok(GatedFeatures {
        a_t2i,
        a_i2t,
        g_t: Some(g_t),
        g_i: Some(g_i),
        t_gated,
        i_gated,
        attn_t2i_w,
        attn_i2t_w,
    })
}
