//! Full pipeline: project → co-attend → dual path → expert fusion → classify.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::ablation::AblationFlags;
use crate::autodiff::{ParamGrads, ParamStore, Tape, Var};
use crate::coattention::{coattend, project, CoAttenParams, GatedFeatures, ProjectionParams};
use crate::data::FeatureRecord;
use crate::dualpath::{dual_path, DualPathOutput, DualPathParams, EncoderShape};
use crate::error::{Error, Result};
use crate::fusion::{classify, expert_fuse, ExpertFusionParams, FusionTrace};
use crate::nn::{Activation, DropoutConfig, Forward, LinearParams, ModelRng};
use crate::tensor::Tensor;

/// Architectural hyperparameters. Input dims and class count may be left
/// unset and filled in from a dataset header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared embedding width `D`.
    pub dim: usize,
    pub text_dim: Option<usize>,
    pub image_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub seq_len: usize,
    /// Heads of the co-attention and cross-attention blocks.
    pub fusion_heads: usize,
    /// Heads of the fusion refinement and encoder self-attention.
    pub refine_heads: usize,
    pub experts: usize,
    pub mf_kernel: usize,
    pub mf_depth: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub fusion_activation: Activation,
    pub mha_bias: bool,
    pub ablation: AblationFlags,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            text_dim: None,
            image_dim: None,
            num_classes: None,
            seq_len: 1,
            fusion_heads: 8,
            refine_heads: 4,
            experts: 2,
            mf_kernel: 3,
            mf_depth: 2,
            dropout: 0.1,
            activation: Activation::Relu,
            fusion_activation: Activation::Relu,
            mha_bias: false,
            ablation: AblationFlags::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Fills unset input dims / class count; set values must agree.
    pub fn resolve(&self, text_dim: usize, image_dim: usize, num_classes: usize) -> Result<Self> {
        let pick = |name: &str, have: Option<usize>, want: usize| match have {
            Some(v) if v != want => Err(Error::Config(format!(
                "{name} = {v} in config but {want} in data"
            ))),
            _ => Ok(Some(want)),
        };
        Ok(ModelConfig {
            text_dim: pick("d_text", self.text_dim, text_dim)?,
            image_dim: pick("d_img", self.image_dim, image_dim)?,
            num_classes: pick("num_classes", self.num_classes, num_classes)?,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return err("dim must be positive".into());
        }
        for (name, h) in [("fusion_heads", self.fusion_heads), ("refine_heads", self.refine_heads)] {
            if h == 0 || !self.dim.is_multiple_of(h) {
                return err(format!("dim {} must be divisible by {name} = {h}", self.dim));
            }
        }
        if self.ablation.two_heads && !self.dim.is_multiple_of((self.refine_heads / 2).max(1)) {
            return err("reduced refinement heads do not divide dim".into());
        }
        if self.mf_kernel.is_multiple_of(2) {
            return err(format!("mf_kernel must be odd, got {}", self.mf_kernel));
        }
        if self.experts < 2 {
            return err(format!("experts must be >= 2, got {}", self.experts));
        }
        if self.seq_len != 1 {
            return err(format!(
                "seq_len must be 1 for pooled features, got {}",
                self.seq_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.ablation.text_only && self.ablation.image_only {
            return err("text_only and image_only are mutually exclusive".into());
        }
        for (name, v) in [
            ("d_text", self.text_dim),
            ("d_img", self.image_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == Some(0) {
                return err(format!("{name} must be positive"));
            }
        }
        if self.num_classes == Some(1) {
            return err("num_classes must be at least 2".into());
        }
        Ok(())
    }

    fn required(&self) -> Result<(usize, usize, usize)> {
        match (self.text_dim, self.image_dim, self.num_classes) {
            (Some(t), Some(i), Some(c)) => Ok((t, i, c)),
            _ => Err(Error::Config(
                "d_text, d_img and num_classes must be known before building a model".into(),
            )),
        }
    }
}

/// One mini-batch of pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, D_text]`
    pub text: Tensor,
    /// `[B, D_img]`
    pub image: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_records<'a, I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureRecord>,
    {
        let mut text = Vec::new();
        let mut image = Vec::new();
        let mut labels = Vec::new();
        let (mut dt, mut di) = (None, None);
        for r in records {
            let want_t = *dt.get_or_insert(r.text.len());
            let want_i = *di.get_or_insert(r.image.len());
            if r.text.len() != want_t || r.image.len() != want_i {
                return Err(Error::Record {
                    id: r.id.clone(),
                    msg: "feature width differs from the rest of the batch".into(),
                });
            }
            text.extend_from_slice(&r.text);
            image.extend_from_slice(&r.image);
            labels.push(r.label);
        }
        let b = labels.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Batch {
            text: Tensor::new(vec![b, dt.unwrap_or(0)], text)?,
            image: Tensor::new(vec![b, di.unwrap_or(0)], image)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Handles to every traced intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub t_seq: Var,
    pub i_seq: Var,
    pub gated: GatedFeatures,
    pub dual: DualPathOutput,
    pub fusion: FusionTrace,
    pub logits: Var,
}

/// Every learnable tensor plus the layout that addresses them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub proj: ProjectionParams,
    pub coattn: CoAttenParams,
    pub dual: DualPathParams,
    pub fusion: ExpertFusionParams,
    pub classifier: LinearParams,
}

impl ModelParams {
    /// Builds and initializes a model; all randomness comes from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (text_dim, image_dim, classes) = config.required()?;
        let mut rng = ModelRng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let proj = ProjectionParams::init(&mut store, text_dim, image_dim, d, &mut rng);
        let coattn = CoAttenParams::init(&mut store, d, config.fusion_heads, config.mha_bias, &mut rng)?;
        let dual = DualPathParams::init(
            &mut store,
            &EncoderShape {
                dim: d,
                depth: config.mf_depth,
                kernel_size: config.mf_kernel,
                encoder_heads: config.refine_heads,
                cross_heads: config.fusion_heads,
                activation: config.activation,
                mha_bias: config.mha_bias,
            },
            &mut rng,
        )?;
        let fusion = ExpertFusionParams::init(
            &mut store,
            d,
            config.experts,
            config.refine_heads,
            config.fusion_activation,
            config.mha_bias,
            config.ablation.no_ef,
            &mut rng,
        )?;
        let classifier = LinearParams::init(&mut store, "classifier", d, classes, true, &mut rng);
        Ok(ModelParams {
            config: config.clone(),
            store,
            proj,
            coattn,
            dual,
            fusion,
            classifier,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim
    }

    pub fn text_dim(&self) -> usize {
        self.proj.text.in_dim
    }

    pub fn image_dim(&self) -> usize {
        self.proj.image.in_dim
    }

    /// Forward pass on an already-bound tape.
    pub fn forward(&self, f: &mut Forward<'_>, text: Var, image: Var) -> Result<ForwardOutput> {
        forward_full(f, self, text, image)
    }

    /// Mean cross-entropy and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        dropout: DropoutConfig,
        rng: Option<&mut ModelRng>,
    ) -> Result<(f64, ParamGrads, Tensor)> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let text = tape.constant(batch.text.clone());
        let image = tape.constant(batch.image.clone());
        let mut f = Forward {
            tape: &mut tape,
            bind: &bind,
            dropout,
            rng,
        };
        let out = forward_full(&mut f, self, text, image)?;
        let loss = tape.cross_entropy(out.logits, &batch.labels)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).item(),
            bind.collect(&tape, &grads),
            tape.value(out.logits).clone(),
        ))
    }

    /// Eval-mode loss only.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let text = tape.constant(batch.text.clone());
        let image = tape.constant(batch.image.clone());
        let mut f = Forward::eval(&mut tape, &bind);
        let out = forward_full(&mut f, self, text, image)?;
        let loss = tape.cross_entropy(out.logits, &batch.labels)?;
        Ok(tape.value(loss).item())
    }

    /// Eval-mode logits `[B, C]`.
    pub fn logits(&self, text: &Tensor, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let t = tape.constant(text.clone());
        let i = tape.constant(image.clone());
        let mut f = Forward::eval(&mut tape, &bind);
        let out = forward_full(&mut f, self, t, i)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Serializes config and parameter values.
    pub fn to_json(&self) -> Result<String> {
        let file = ParamsFile {
            format: PARAMS_FORMAT.into(),
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|(_, name, t)| StoredParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// Rebuilds the layout from the stored config and loads every value by name.
    pub fn from_json(s: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        if file.format != PARAMS_FORMAT {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported params format {:?}", file.format),
            });
        }
        let mut model = ModelParams::new(&file.config)?;
        if file.params.len() != model.store.len() {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "{} stored parameters, model expects {}",
                    file.params.len(),
                    model.store.len()
                ),
            });
        }
        for p in file.params {
            let id = model.store.find(&p.name).ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("unknown parameter {}", p.name),
            })?;
            let value = Tensor::new(p.shape, p.data)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("stored parameter {}", p.name)));
            }
            model.store.set(id, value)?;
        }
        Ok(model)
    }
}

const PARAMS_FORMAT: &str = "coattendwg-params-v1";

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    config: ModelConfig,
    params: Vec<StoredParam>,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Runs the whole pipeline on pooled features `text [B, D_text]`,
/// `image [B, D_img]`, honoring the model's ablation flags.
pub fn forward_full(
    f: &mut Forward<'_>,
    model: &ModelParams,
    text: Var,
    image: Var,
) -> Result<ForwardOutput> {
    let flags = &model.config.ablation;
    let text = if flags.image_only {
        let z = Tensor::zeros(f.tape.shape(text));
        f.tape.constant(z)
    } else {
        text
    };
    let image = if flags.text_only {
        let z = Tensor::zeros(f.tape.shape(image));
        f.tape.constant(z)
    } else {
        image
    };

    let (t_seq, i_seq) = project(f, &model.proj, text, image)?;
    let gated = coattend(f, &model.coattn, t_seq, i_seq, flags)?;
    let dual = dual_path(f, &model.dual, t_seq, i_seq, &gated, flags)?;
    let fusion = expert_fuse(f, &model.fusion, dual.z_text_final, dual.z_img_final, flags)?;
    let logits = classify(f, &model.classifier, fusion.e_out)?;
    Ok(ForwardOutput {
        t_seq,
        i_seq,
        gated,
        dual,
        fusion,
        logits,
    })
}
