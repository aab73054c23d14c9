//! Multimodal classification from pooled text and image features using
//! co-attention, dimension-wise gating, dual-path convolution/attention
//! encoders, cross-attention and a mixture-of-experts fusion head.
//!
//! Everything runs on a small double-precision tensor type with a
//! reverse-mode tape, so gradients can be checked against finite differences.
//!
//! ```
//! use coattendwg::data::{synth_generate, SyntheticSpec};
//! use coattendwg::model::{ModelConfig, ModelParams};
//! use coattendwg::train::evaluate;
//!
//! let data = synth_generate(&SyntheticSpec::xor(8, 0.1, 0)).unwrap();
//! let cfg = ModelConfig { dim: 8, fusion_heads: 2, refine_heads: 2, ..Default::default() }
//!     .resolve(data.text_dim, data.image_dim, data.num_classes)
//!     .unwrap();
//! let model = ModelParams::new(&cfg).unwrap();
//! let metrics = evaluate(&model, &data).unwrap();
//! assert_eq!(metrics.samples, 8);
//! ```

pub mod ablation;
pub mod autodiff;
pub mod coattention;
pub mod data;
pub mod dualpath;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use ablation::AblationFlags;
pub use error::{Error, Result};
pub use model::{forward_full, Batch, ForwardOutput, ModelConfig, ModelParams};
pub use tensor::Tensor;
