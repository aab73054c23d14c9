use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, Metrics};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::{EarlyStopping, ReduceOnPlateau};
use super::upsample_balance;
use crate::autodiff::ParamStore;
use crate::data::{split, Dataset};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, ModelParams};
use crate::nn::{DropoutConfig, ModelRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub sched_factor: f64,
    pub sched_patience: usize,
    /// Minimum loss decrease that counts as an improvement.
    pub sched_threshold: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fraction of the training data held out for early stopping.
    pub val_fraction: f64,
    /// Upsample minority classes of the training portion.
    pub balance: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            max_epochs: 20,
            early_stop_patience: 3,
            sched_factor: 0.5,
            sched_patience: 2,
            sched_threshold: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            val_fraction: 0.1,
            balance: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be >= 1".into());
        }
        if self.early_stop_patience == 0 || self.sched_patience == 0 {
            return err("patience values must be >= 1".into());
        }
        if !(self.sched_factor > 0.0 && self.sched_factor <= 1.0) {
            return err(format!("sched_factor must lie in (0, 1], got {}", self.sched_factor));
        }
        if !(self.sched_threshold >= 0.0) {
            return err("sched_threshold must be >= 0".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay must be finite and >= 0".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Single-model optimization state.
pub struct Trainer {
    pub model: ModelParams,
    pub weight_decay: f64,
    optimizer: AdamW,
    rng: ModelRng,
    dropout: f64,
    steps: usize,
}

impl Trainer {
    pub fn new(model: ModelParams, weight_decay: f64, seed: u64) -> Self {
        let optimizer = AdamW::new(&model.store, AdamWConfig::default());
        let dropout = model.config.dropout;
        Trainer {
            model,
            weight_decay,
            optimizer,
            rng: ModelRng::seed_from_u64(seed),
            dropout,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rng(&mut self) -> &mut ModelRng {
        &mut self.rng
    }

    /// Forward (train-mode dropout), backward and one AdamW update.
    /// Returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64, epoch: usize) -> Result<f64> {
        let (loss, grads, _) = self.model.loss_and_grads(
            batch,
            DropoutConfig::train(self.dropout),
            Some(&mut self.rng),
        )?;
        self.steps += 1;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: self.steps,
                loss,
            });
        }
        self.optimizer
            .step(&mut self.model.store, &grads, lr, self.weight_decay)?;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

fn g17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // JSON has no non-finite numbers
        "null".into()
    }
}

impl EpochRecord {
    /// One JSON object, floats with 17 significant digits.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"epoch\":{},\"lr\":{},\"train_loss\":{},\"val_loss\":{},\"val_accuracy\":{},\"val_macro_f1\":{}}}",
            self.epoch,
            g17(self.lr),
            g17(self.train_loss),
            g17(self.val_loss),
            g17(self.val_accuracy),
            g17(self.val_macro_f1),
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest monitored loss.
    pub model: ModelParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn mean_loss(model: &ModelParams, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.records.chunks(batch_size.max(1)) {
        total += model.loss(&Batch::from_records(chunk)?)? * chunk.len() as f64;
    }
    Ok(total / data.records.len().max(1) as f64)
}

/// Seeded end-to-end training with a held-out validation split,
/// reduce-on-plateau scheduling, early stopping and best-checkpoint retention.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let model_cfg = model_cfg.resolve(dataset.text_dim, dataset.image_dim, dataset.num_classes)?;
    let model = ModelParams::new(&model_cfg)?;

    let (mut train_set, val_set) = if cfg.val_fraction > 0.0 {
        split(dataset, 1.0 - cfg.val_fraction, cfg.seed)?
    } else {
        (dataset.clone(), dataset.subset(&[]))
    };
    let mut trainer = Trainer::new(model, cfg.weight_decay, cfg.seed);
    if cfg.balance {
        train_set = upsample_balance(&train_set, trainer.rng())?;
    }

    let mut sched = ReduceOnPlateau::new(cfg.lr, cfg.sched_factor, cfg.sched_patience, cfg.sched_threshold);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.sched_threshold);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.records.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        order.shuffle(trainer.rng());
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = Batch::from_records(idx.iter().map(|&i| &train_set.records[i]))?;
            loss_sum += trainer.train_step(&batch, lr, epoch)? * idx.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;

        let (val_loss, val_metrics) = if val_set.records.is_empty() {
            let m = evaluate(&trainer.model, &train_set)?;
            (mean_loss(&trainer.model, &train_set, cfg.batch_size)?, m)
        } else {
            let m: Metrics = evaluate(&trainer.model, &val_set)?;
            (mean_loss(&trainer.model, &val_set, cfg.batch_size)?, m)
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: trainer.steps(),
                loss: val_loss,
            });
        }
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_accuracy: val_metrics.accuracy,
            val_macro_f1: val_metrics.macro_f1,
        });

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, trainer.model.store.clone()));
        }
        sched.step(val_loss);
        if stopper.step(val_loss) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    let mut model = trainer.model;
    model.store = store;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        stopped_early,
    })
}
