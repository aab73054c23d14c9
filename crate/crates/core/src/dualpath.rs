//! Dual-path encoders and the second cross-attention alignment.
//!
//! The text path encodes the gated *image* feature and the image path the
//! gated *text* feature; each result is added back onto its own projection:
//!
//! ```text
//! Z_text = Enc_t(I~) + T_seq          Z_img = Enc_i(T~) + I_seq
//! T_cross = XA_t(T_seq, I_seq, I_seq) I_cross = XA_i(I_seq, T_seq, T_seq)
//! Z_text_final = Z_text + T_cross     Z_img_final = Z_img + I_cross
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::AblationFlags;
use crate::autodiff::{ParamStore, Var};
use crate::coattention::GatedFeatures;
use crate::error::Result;
use crate::nn::{mambaformer_encode, mha, Activation, Forward, MambaFormerLayer, MhaParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPathParams {
    pub text_path: Vec<MambaFormerLayer>,
    pub image_path: Vec<MambaFormerLayer>,
    pub xattn_t: MhaParams,
    pub xattn_i: MhaParams,
}

pub struct EncoderShape {
    pub dim: usize,
    pub depth: usize,
    pub kernel_size: usize,
    pub encoder_heads: usize,
    pub cross_heads: usize,
    pub activation: Activation,
    pub mha_bias: bool,
}

impl DualPathParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        shape: &EncoderShape,
        rng: &mut R,
    ) -> Result<Self> {
        let mut stack = |path: &str, rng: &mut R| -> Result<Vec<MambaFormerLayer>> {
            (0..shape.depth)
                .map(|l| {
                    MambaFormerLayer::init(
                        store,
                        &format!("enc.{path}.{l}"),
                        shape.dim,
                        shape.encoder_heads,
                        shape.kernel_size,
                        shape.activation,
                        shape.mha_bias,
                        rng,
                    )
                })
                .collect()
        };
        let text_path = stack("text", rng)?;
        let image_path = stack("image", rng)?;
        Ok(DualPathParams {
            text_path,
            image_path,
            xattn_t: MhaParams::init(store, "xattn.text", shape.dim, shape.cross_heads, shape.mha_bias, rng)?,
            xattn_i: MhaParams::init(store, "xattn.image", shape.dim, shape.cross_heads, shape.mha_bias, rng)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DualPathOutput {
    pub z_text: Var,
    pub z_img: Var,
    pub t_cross: Var,
    pub i_cross: Var,
    pub z_text_final: Var,
    pub z_img_final: Var,
    pub xattn_t_w: Option<Var>,
    pub xattn_i_w: Option<Var>,
}

pub fn dual_path(
    f: &mut Forward<'_>,
    params: &DualPathParams,
    t_seq: Var,
    i_seq: Var,
    gated: &GatedFeatures,
    flags: &AblationFlags,
) -> Result<DualPathOutput> {
    let (text_layers, image_layers): (&[MambaFormerLayer], &[MambaFormerLayer]) = if flags.no_mf {
        (&[], &[])
    } else {
        (&params.text_path, &params.image_path)
    };

    let z_t2i = mambaformer_encode(f, text_layers, gated.i_gated)?;
    let z_text = f.tape.add(z_t2i, t_seq)?;
    let z_i2t = mambaformer_encode(f, image_layers, gated.t_gated)?;
    let z_img = f.tape.add(z_i2t, i_seq)?;

    let (t_cross, i_cross, xattn_t_w, xattn_i_w) = if flags.no_xa {
        let zeros = Tensor::zeros(f.tape.shape(t_seq));
        let zt = f.tape.constant(zeros.clone());
        let zi = f.tape.constant(zeros);
        (zt, zi, None, None)
    } else {
        let t = mha(f, &params.xattn_t, t_seq, i_seq, i_seq)?;
        let i = mha(f, &params.xattn_i, i_seq, t_seq, t_seq)?;
        (t.out, i.out, Some(t.attn), Some(i.attn))
    };

    let z_text_final = f.tape.add(z_text, t_cross)?;
    let z_img_final = f.tape.add(z_img, i_cross)?;
    Ok(DualPathOutput {
        z_text,
        z_img,
        t_cross,
        i_cross,
        z_text_final,
        z_img_final,
        xattn_t_w,
        xattn_i_w,
    })
}
