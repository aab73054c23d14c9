//! Flat `key = value` run configuration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::ablation::AblationFlags;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::Activation;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {raw:?} for {key}")))
}

fn optional(key: &str, raw: &str, line: usize) -> Result<Option<usize>> {
    if raw == "auto" {
        Ok(None)
    } else {
        value(key, raw, line).map(Some)
    }
}

fn flag(key: &str, raw: &str, line: usize) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: invalid boolean {raw:?} for {key}"))),
    }
}

/// Parses a config file. Missing keys keep their defaults; unknown or
/// repeated keys are errors. `#` starts a comment.
pub fn parse_config(src: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (i, raw_line) in src.lines().enumerate() {
        let line = i + 1;
        let text = raw_line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line}: duplicate key {key}")));
        }
        let (m, t) = (&mut cfg.model, &mut cfg.train);
        match key {
            "dim" => m.dim = value(key, raw, line)?,
            "d_text" => m.text_dim = optional(key, raw, line)?,
            "d_img" => m.image_dim = optional(key, raw, line)?,
            "num_classes" => m.num_classes = optional(key, raw, line)?,
            "seq_len" => m.seq_len = value(key, raw, line)?,
            "fusion_heads" => m.fusion_heads = value(key, raw, line)?,
            "refine_heads" => m.refine_heads = value(key, raw, line)?,
            "experts" => m.experts = value(key, raw, line)?,
            "mf_kernel" => m.mf_kernel = value(key, raw, line)?,
            "mf_depth" => m.mf_depth = value(key, raw, line)?,
            "dropout" => m.dropout = value(key, raw, line)?,
            "activation" => m.activation = value::<Activation>(key, raw, line)?,
            "fusion_activation" => m.fusion_activation = value::<Activation>(key, raw, line)?,
            "mha_bias" => m.mha_bias = flag(key, raw, line)?,
            "ablation" => {
                m.ablation = AblationFlags::parse_list(raw)
                    .map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            "seed" => m.seed = value(key, raw, line)?,
            "lr" => t.lr = value(key, raw, line)?,
            "max_epochs" => t.max_epochs = value(key, raw, line)?,
            "early_stop_patience" => t.early_stop_patience = value(key, raw, line)?,
            "sched_factor" => t.sched_factor = value(key, raw, line)?,
            "sched_patience" => t.sched_patience = value(key, raw, line)?,
            "sched_threshold" => t.sched_threshold = value(key, raw, line)?,
            "weight_decay" => t.weight_decay = value(key, raw, line)?,
            "batch_size" => t.batch_size = value(key, raw, line)?,
            "val_fraction" => t.val_fraction = value(key, raw, line)?,
            "balance" => t.balance = flag(key, raw, line)?,
            "train_seed" => t.seed = value(key, raw, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
        }
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Every key with its current value, parseable by [`parse_config`].
pub fn render_config(cfg: &RunConfig) -> String {
    let m = &cfg.model;
    let t = &cfg.train;
    let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
    let mut s = String::new();
    let pairs: Vec<(&str, String)> = vec![
        ("dim", m.dim.to_string()),
        ("d_text", opt(m.text_dim)),
        ("d_img", opt(m.image_dim)),
        ("num_classes", opt(m.num_classes)),
        ("seq_len", m.seq_len.to_string()),
        ("fusion_heads", m.fusion_heads.to_string()),
        ("refine_heads", m.refine_heads.to_string()),
        ("experts", m.experts.to_string()),
        ("mf_kernel", m.mf_kernel.to_string()),
        ("mf_depth", m.mf_depth.to_string()),
        ("dropout", m.dropout.to_string()),
        ("activation", m.activation.to_string()),
        ("fusion_activation", m.fusion_activation.to_string()),
        ("mha_bias", m.mha_bias.to_string()),
        ("ablation", m.ablation.to_list()),
        ("seed", m.seed.to_string()),
        ("lr", t.lr.to_string()),
        ("max_epochs", t.max_epochs.to_string()),
        ("early_stop_patience", t.early_stop_patience.to_string()),
        ("sched_factor", t.sched_factor.to_string()),
        ("sched_patience", t.sched_patience.to_string()),
        ("sched_threshold", t.sched_threshold.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("val_fraction", t.val_fraction.to_string()),
        ("balance", t.balance.to_string()),
        ("train_seed", t.seed.to_string()),
    ];
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}
