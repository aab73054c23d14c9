//! Mixture-of-experts fusion head and the linear classifier.
//!
//! ```text
//! C = [Z_text_final ; Z_img_final]        (B, 2D)
//! F = act(W_f C + b_f)                    (B, D)
//! g = softmax(W_g C + b_g)                (B, E)
//! S = sum_e g_e * expert_e                (B, D)
//! A = MHA(S, S, S)   per sample, length-1 sequence
//! E = LayerNorm(F + S + A)
//! ```
//!
//! With two experts the experts are the modality representations themselves;
//! with more, each expert is a learned projection of `C`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::AblationFlags;
use crate::autodiff::{ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, mha, Activation, Forward, LayerNormParams, LinearParams, MhaParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFusionParams {
    pub dim: usize,
    pub experts: usize,
    pub fusion: LinearParams,
    pub gate: LinearParams,
    /// Present only when `experts > 2`.
    pub expert_proj: Vec<LinearParams>,
    pub refine: MhaParams,
    pub final_ln: LayerNormParams,
    pub activation: Activation,
    /// Plain concat + linear head used instead of the expert mixture when
    /// expert fusion is ablated.
    pub concat_head: Option<LinearParams>,
}

impl ExpertFusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        experts: usize,
        refine_heads: usize,
        activation: Activation,
        mha_bias: bool,
        with_concat_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if experts < 2 {
            return Err(Error::Config(format!("need at least 2 experts, got {experts}")));
        }
        let fusion = LinearParams::init(store, "fusion.ffn", 2 * dim, dim, true, rng);
        let gate = LinearParams::init(store, "fusion.gate", 2 * dim, experts, true, rng);
        let expert_proj = if experts > 2 {
            (0..experts)
                .map(|e| LinearParams::init(store, &format!("fusion.expert.{e}"), 2 * dim, dim, true, rng))
                .collect()
        } else {
            Vec::new()
        };
        let refine = MhaParams::init(store, "fusion.refine", dim, refine_heads, mha_bias, rng)?;
        let final_ln = LayerNormParams::init(store, "fusion.ln", dim);
        let concat_head = with_concat_head
            .then(|| LinearParams::init(store, "fusion.concat", 2 * dim, dim, true, rng));
        Ok(ExpertFusionParams {
            dim,
            experts,
            fusion,
            gate,
            expert_proj,
            refine,
            final_ln,
            activation,
            concat_head,
        })
    }
}

/// Fusion intermediates; all `[B, D]` except `g [B, E]` and the refinement
/// weights `[B, heads, 1, 1]`. Everything but `e_out` is absent under `no_EF`.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    pub g: Option<Var>,
    pub f: Option<Var>,
    pub s: Option<Var>,
    pub a: Option<Var>,
    pub e_out: Var,
    pub refine_w: Option<Var>,
}

fn squeeze_seq(f: &mut Forward<'_>, x: Var, dim: usize) -> Result<Var> {
    let shape = f.tape.shape(x).to_vec();
    match shape.as_slice() {
        [b, 1, d] if *d == dim => f.tape.reshape(x, &[*b, dim]),
        [_, d] if *d == dim => Ok(x),
        _ => Err(Error::InvalidShape {
            op: "expert_fuse",
            shape,
            reason: format!("expected [B, 1, {dim}] or [B, {dim}]"),
        }),
    }
}

pub fn expert_fuse(
    f: &mut Forward<'_>,
    params: &ExpertFusionParams,
    z_text_final: Var,
    z_img_final: Var,
    flags: &AblationFlags,
) -> Result<FusionTrace> {
    let zt = squeeze_seq(f, z_text_final, params.dim)?;
    let zi = squeeze_seq(f, z_img_final, params.dim)?;
    let c = f.tape.concat_last(&[zt, zi])?;

    if flags.no_ef {
        let head = params.concat_head.as_ref().ok_or_else(|| {
            Error::Config("expert fusion ablated but no concat head was initialized".into())
        })?;
        let e_out = head.forward(f, c)?;
        return Ok(FusionTrace {
            g: None,
            f: None,
            s: None,
            a: None,
            e_out,
            refine_w: None,
        });
    }

    let pre = params.fusion.forward(f, c)?;
    let fused = params.activation.apply(f, pre);
    let fused = dropout(f.dropout, f.tape, fused, f.rng.as_deref_mut())?;

    let logits = params.gate.forward(f, c)?;
    let g = f.tape.softmax(logits, 1)?;

    let experts: Vec<Var> = if params.experts == 2 {
        vec![zt, zi]
    } else {
        if params.expert_proj.len() != params.experts {
            return Err(Error::Config(format!(
                "{} expert projections for {} experts",
                params.expert_proj.len(),
                params.experts
            )));
        }
        params
            .expert_proj
            .iter()
            .map(|p| p.forward(f, c))
            .collect::<Result<_>>()?
    };
    let mut s: Option<Var> = None;
    for (e, &expert) in experts.iter().enumerate() {
        let w = f.tape.select_last(g, e)?;
        let term = f.tape.scale_rows(expert, w)?;
        s = Some(match s {
            Some(acc) => f.tape.add(acc, term)?,
            None => term,
        });
    }
    let s = s.expect("at least two experts");

    let b = f.tape.shape(s)[0];
    let refine = if flags.two_heads {
        params.refine.with_heads((params.refine.heads / 2).max(1))?
    } else {
        params.refine.clone()
    };
    // one length-1 sequence per sample; no attention across the batch
    let s_seq = f.tape.reshape(s, &[b, 1, params.dim])?;
    let attended = mha(f, &refine, s_seq, s_seq, s_seq)?;
    let a = f.tape.reshape(attended.out, &[b, params.dim])?;

    let sum = f.tape.add(fused, s)?;
    let sum = f.tape.add(sum, a)?;
    let e_out = params.final_ln.forward(f, sum)?;
    Ok(FusionTrace {
        g: Some(g),
        f: Some(fused),
        s: Some(s),
        a: Some(a),
        e_out,
        refine_w: Some(attended.attn),
    })
}

/// Class logits `[B, C]` from the fused representation.
pub fn classify(f: &mut Forward<'_>, params: &LinearParams, e_out: Var) -> Result<Var> {
    params.forward(f, e_out)
}
