//! Straight-line reference implementation working on plain nested vectors,
//! plus small fixtures shared by the integration tests.

#![allow(dead_code)]

use coattendwg::autodiff::ParamStore;
use coattendwg::data::{Dataset, FeatureRecord};
use coattendwg::nn::Activation;
use coattendwg::autodiff::Tape;
use coattendwg::nn::Forward;
use coattendwg::{AblationFlags, Batch, ForwardOutput, ModelConfig, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Seq = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// The smallest configuration that still exercises every component.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        text_dim: Some(6),
        image_dim: Some(10),
        num_classes: Some(3),
        fusion_heads: 2,
        refine_heads: 2,
        experts: 2,
        mf_depth: 2,
        mf_kernel: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn random_dataset(n: usize, t: usize, i: usize, c: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    Dataset {
        text_dim: t,
        image_dim: i,
        num_classes: c,
        records: (0..n)
            .map(|k| FeatureRecord {
                id: format!("r{k}"),
                text: (0..t).map(|_| r.random_range(-1.0..1.0)).collect(),
                image: (0..i).map(|_| r.random_range(-1.0..1.0)).collect(),
                label: k % c,
            })
            .collect(),
    }
}

pub fn random_batch(model: &ModelParams, b: usize, scale: f64, seed: u64) -> Batch {
    let mut r = rng(seed);
    Batch {
        text: random_tensor(&[b, model.text_dim()], scale, &mut r),
        image: random_tensor(&[b, model.image_dim()], scale, &mut r),
        labels: (0..b).map(|i| (i * 2 + seed as usize) % model.num_classes()).collect(),
    }
}

/// Runs the model in eval mode and hands the tape and traced handles to `inspect`.
pub fn with_forward<T>(
    model: &ModelParams,
    batch: &Batch,
    inspect: impl FnOnce(&Tape, &ForwardOutput) -> T,
) -> T {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let t = tape.constant(batch.text.clone());
    let i = tape.constant(batch.image.clone());
    let out = {
        let mut f = Forward::eval(&mut tape, &bind);
        model.forward(&mut f, t, i).unwrap()
    };
    inspect(&tape, &out)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store
        .by_name(name)
        .unwrap_or_else(|_| panic!("missing parameter {name}"))
}

fn opt<'a>(store: &'a ParamStore, name: &str) -> Option<&'a Tensor> {
    store.find(name).map(|id| store.get(id))
}

/// `W x + b` with `W` stored `[out, in]`.
pub fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| {
            let mut s = 0.0;
            for i in 0..inp {
                s += w.data()[o * inp + i] * x[i];
            }
            s + b.map_or(0.0, |b| b.data()[o])
        })
        .collect()
}

pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    affine(
        p(store, &format!("{name}.weight")),
        opt(store, &format!("{name}.bias")),
        x,
    )
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let g = p(store, &format!("{name}.gamma")).data();
    let b = p(store, &format!("{name}.beta")).data();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    (0..x.len()).map(|i| g[i] * (x[i] - mean) * rstd + b[i]).collect()
}

/// Multi-head attention by explicit loops. Returns the output sequence and
/// weights `[head][query][key]`.
pub fn mha(store: &ParamStore, name: &str, heads: usize, q: &Seq, k: &Seq, v: &Seq) -> (Seq, Vec<Seq>) {
    let d = q[0].len();
    let dh = d / heads;
    let qp: Seq = q.iter().map(|x| linear(store, &format!("{name}.q"), x)).collect();
    let kp: Seq = k.iter().map(|x| linear(store, &format!("{name}.k"), x)).collect();
    let vp: Seq = v.iter().map(|x| linear(store, &format!("{name}.v"), x)).collect();
    let mut weights = Vec::new();
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let mut wh = Vec::new();
        for (qi, qrow) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|krow| {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += qrow[c] * krow[c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let w = softmax(&scores);
            for c in h * dh..(h + 1) * dh {
                merged[qi][c] = w.iter().zip(&vp).map(|(a, vr)| a * vr[c]).sum();
            }
            wh.push(w);
        }
        weights.push(wh);
    }
    let out = merged.iter().map(|x| linear(store, &format!("{name}.o"), x)).collect();
    (out, weights)
}

/// Zero-padded same-length convolution, kernel `[k, D_out, D_in]`.
pub fn conv_same(kernel: &Tensor, bias: &Tensor, x: &Seq) -> Seq {
    let (k, d_out, d_in) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let pad = (k - 1) as isize / 2;
    let l = x.len() as isize;
    (0..l)
        .map(|t| {
            (0..d_out)
                .map(|o| {
                    let mut s = bias.data()[o];
                    for j in 0..k {
                        let src = t + j as isize - pad;
                        if src < 0 || src >= l {
                            continue;
                        }
                        for i in 0..d_in {
                            s += kernel.data()[(j * d_out + o) * d_in + i] * x[src as usize][i];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn add_seq(a: &Seq, b: &Seq) -> Seq {
    a.iter().zip(b).map(|(x, y)| add(x, y)).collect()
}

pub fn mambaformer_layer(store: &ParamStore, name: &str, heads: usize, a: Activation, x: &Seq) -> Seq {
    let h: Seq = x.iter().map(|r| layer_norm(store, &format!("{name}.ln1"), r)).collect();
    let c = conv_same(
        p(store, &format!("{name}.conv.kernel")),
        p(store, &format!("{name}.conv.bias")),
        &h,
    );
    let c: Seq = c.iter().map(|r| r.iter().map(|v| act(a, *v)).collect()).collect();
    let u = add_seq(x, &c);
    let h2: Seq = u.iter().map(|r| layer_norm(store, &format!("{name}.ln2"), r)).collect();
    let (att, _) = mha(store, &format!("{name}.attn"), heads, &h2, &h2, &h2);
    add_seq(&u, &att)
}

/// Everything the pipeline produces for one sample.
#[derive(Debug, Default)]
pub struct OracleSample {
    pub t_seq: Vec<f64>,
    pub i_seq: Vec<f64>,
    pub a_t2i: Vec<f64>,
    pub a_i2t: Vec<f64>,
    pub g_t: Vec<f64>,
    pub g_i: Vec<f64>,
    pub z_text_final: Vec<f64>,
    pub z_img_final: Vec<f64>,
    pub g: Vec<f64>,
    pub s: Vec<f64>,
    pub e_out: Vec<f64>,
    pub logits: Vec<f64>,
}

/// The full model on one pooled sample, length-1 sequences throughout.
pub fn forward_sample(cfg: &ModelConfig, store: &ParamStore, text: &[f64], image: &[f64]) -> OracleSample {
    let flags: AblationFlags = cfg.ablation;
    let zeros_t = vec![0.0; text.len()];
    let zeros_i = vec![0.0; image.len()];
    let text = if flags.image_only { &zeros_t[..] } else { text };
    let image = if flags.text_only { &zeros_i[..] } else { image };
    let mut o = OracleSample {
        t_seq: linear(store, "proj.text", text),
        i_seq: linear(store, "proj.image", image),
        ..Default::default()
    };
    let t = vec![o.t_seq.clone()];
    let i = vec![o.i_seq.clone()];

    let (a_t2i, a_i2t) = if flags.no_ca {
        (t.clone(), i.clone())
    } else {
        (
            mha(store, "coattn.t2i", cfg.fusion_heads, &t, &i, &i).0,
            mha(store, "coattn.i2t", cfg.fusion_heads, &i, &t, &t).0,
        )
    };
    o.a_t2i = a_t2i[0].clone();
    o.a_i2t = a_i2t[0].clone();
    let (t_g, i_g) = if flags.no_ff {
        (a_t2i.clone(), a_i2t.clone())
    } else {
        o.g_t = linear(store, "gate.text", &o.a_t2i).into_iter().map(sigmoid).collect();
        o.g_i = linear(store, "gate.image", &o.a_i2t).into_iter().map(sigmoid).collect();
        (
            vec![o.g_t.iter().zip(&o.a_t2i).map(|(g, a)| g * a).collect()],
            vec![o.g_i.iter().zip(&o.a_i2t).map(|(g, a)| g * a).collect()],
        )
    };

    let mut zt = i_g.clone();
    let mut zi = t_g.clone();
    if !flags.no_mf {
        for l in 0..cfg.mf_depth {
            zt = mambaformer_layer(store, &format!("enc.text.{l}"), cfg.refine_heads, cfg.activation, &zt);
            zi = mambaformer_layer(store, &format!("enc.image.{l}"), cfg.refine_heads, cfg.activation, &zi);
        }
    }
    let z_text = add(&zt[0], &o.t_seq);
    let z_img = add(&zi[0], &o.i_seq);
    let (t_cross, i_cross) = if flags.no_xa {
        (vec![0.0; cfg.dim], vec![0.0; cfg.dim])
    } else {
        (
            mha(store, "xattn.text", cfg.fusion_heads, &t, &i, &i).0[0].clone(),
            mha(store, "xattn.image", cfg.fusion_heads, &i, &t, &t).0[0].clone(),
        )
    };
    o.z_text_final = add(&z_text, &t_cross);
    o.z_img_final = add(&z_img, &i_cross);

    let c: Vec<f64> = o.z_text_final.iter().chain(&o.z_img_final).cloned().collect();
    o.e_out = if flags.no_ef {
        linear(store, "fusion.concat", &c)
    } else {
        let f: Vec<f64> = linear(store, "fusion.ffn", &c)
            .into_iter()
            .map(|v| act(cfg.fusion_activation, v))
            .collect();
        o.g = softmax(&linear(store, "fusion.gate", &c));
        let experts: Vec<Vec<f64>> = if cfg.experts == 2 {
            vec![o.z_text_final.clone(), o.z_img_final.clone()]
        } else {
            (0..cfg.experts)
                .map(|e| linear(store, &format!("fusion.expert.{e}"), &c))
                .collect()
        };
        o.s = (0..cfg.dim)
            .map(|d| experts.iter().zip(&o.g).map(|(x, w)| w * x[d]).sum())
            .collect();
        let heads = if flags.two_heads {
            (cfg.refine_heads / 2).max(1)
        } else {
            cfg.refine_heads
        };
        let s_seq = vec![o.s.clone()];
        let a = mha(store, "fusion.refine", heads, &s_seq, &s_seq, &s_seq).0[0].clone();
        let sum: Vec<f64> = (0..cfg.dim).map(|d| f[d] + o.s[d] + a[d]).collect();
        layer_norm(store, "fusion.ln", &sum)
    };
    o.logits = linear(store, "classifier", &o.e_out);
    o
}
