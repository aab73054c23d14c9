mod common;

use coattendwg::autodiff::{ParamGrads, ParamStore};
use coattendwg::data::{synth_generate, Dataset, FeatureRecord, SyntheticSpec};
use coattendwg::nn::ModelRng;
use coattendwg::train::{
    evaluate, train, upsample_balance, AdamW, AdamWConfig, EarlyStopping, EpochRecord, Metrics,
    ReduceOnPlateau, TrainConfig, Trainer,
};
use coattendwg::{Batch, Error, ModelConfig, ModelParams, Tensor};
use common::*;
use rand::SeedableRng;

#[test]
fn metrics_perfect_predictor() {
    let labels = [0, 1, 1, 0, 2, 2, 1];
    let m = Metrics::from_predictions(&labels, &labels, 3);
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.macro_f1, 1.0);
    assert!(m.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0));
}

#[test]
fn metrics_from_known_counts() {
    // 410 TP, 49 FP, 85 FN, 456 TN for the positive class
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (p, y, n) in [(1, 1, 410), (1, 0, 49), (0, 1, 85), (0, 0, 456)] {
        preds.extend(std::iter::repeat_n(p, n));
        labels.extend(std::iter::repeat_n(y, n));
    }
    let m = Metrics::from_predictions(&preds, &labels, 2);
    let pos = &m.per_class[1];
    assert_eq!((pos.counts.tp, pos.counts.fp, pos.counts.fn_, pos.counts.tn), (410, 49, 85, 456));
    assert!((pos.precision - 410.0 / 459.0).abs() < 1e-15);
    assert!((pos.recall - 410.0 / 495.0).abs() < 1e-15);
    assert!((pos.f1 - 820.0 / 954.0).abs() < 1e-15);
    assert!((m.accuracy - 866.0 / 1000.0).abs() < 1e-15);
    let neg_f1 = 2.0 * 456.0 / (2.0 * 456.0 + 85.0 + 49.0);
    assert!((m.macro_f1 - (neg_f1 + 820.0 / 954.0) / 2.0).abs() < 1e-15);
}

fn labelled(labels: &[usize]) -> Dataset {
    Dataset {
        records: labels
            .iter()
            .enumerate()
            .map(|(k, &label)| FeatureRecord {
                id: format!("x{k}"),
                text: vec![k as f64],
                image: vec![0.0],
                label,
            })
            .collect(),
        ..Dataset::new(1, 1, 2)
    }
}

#[test]
fn balancing_upsamples_the_minority() {
    let ds = labelled(&[0, 1, 0, 1, 1, 1, 1, 0, 1, 1]);
    assert_eq!(ds.class_counts(), vec![3, 7]);
    let out = upsample_balance(&ds, &mut ModelRng::seed_from_u64(0)).unwrap();
    assert_eq!(out.class_counts(), vec![7, 7]);
    assert_eq!(&out.records[..10], &ds.records[..]);
    for extra in &out.records[10..] {
        assert_eq!(extra.label, 0);
        assert!(ds.records.contains(extra));
    }
}

#[test]
fn balancing_needs_every_class() {
    let ds = labelled(&[1, 1, 1]);
    assert!(upsample_balance(&ds, &mut ModelRng::seed_from_u64(0)).is_err());
}

/// Straight-line AdamW over one tensor.
fn adamw_oracle(theta: &[f64], grads: &[Vec<f64>], lr: f64, wd: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut th = theta.to_vec();
    let mut m = vec![0.0; th.len()];
    let mut v = vec![0.0; th.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for j in 0..th.len() {
            th[j] -= lr * wd * th[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / (1.0 - b1.powi(t));
            let vh = v[j] / (1.0 - b2.powi(t));
            th[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    th
}

#[test]
fn adamw_matches_oracle() {
    let mut store = ParamStore::new();
    let theta = vec![0.5, -1.0, 2.0, 0.0];
    let id = store.add("w", Tensor::new(vec![4], theta.clone()).unwrap());
    let steps = vec![vec![0.1, -0.2, 0.3, 1.0], vec![0.0, 0.5, -0.5, 1e-3], vec![2.0, 2.0, 2.0, 2.0]];
    let mut opt = AdamW::new(&store, AdamWConfig::default());
    for g in &steps {
        let mut grads = ParamGrads::zeros_like(&store);
        grads.get_mut(id).data_mut().copy_from_slice(g);
        opt.step(&mut store, &grads, 0.05, 0.1).unwrap();
    }
    assert_eq!(opt.steps(), 3);
    let want = adamw_oracle(&theta, &steps, 0.05, 0.1);
    assert!(max_diff(store.get(id).data(), &want) < 1e-14);
}

#[test]
fn scheduler_halves_after_patience() {
    let mut s = ReduceOnPlateau::new(1.0, 0.5, 2, 1e-4);
    let lrs: Vec<f64> = [1.0, 0.9, 0.9, 0.9, 0.95, 0.8, 0.8, 0.8].map(|l| s.step(l)).to_vec();
    assert_eq!(lrs, [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.25]);

    let mut stop = EarlyStopping::new(3, 1e-4);
    let stops: Vec<bool> = [1.0, 0.99995, 0.9, 0.95, 0.9, 0.91].map(|l| stop.step(l)).to_vec();
    assert_eq!(stops, [false, false, false, false, false, true]);
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        max_epochs: 3,
        batch_size: 8,
        val_fraction: 0.25,
        ..TrainConfig::default()
    }
}

fn model_for(ds: &Dataset) -> ModelConfig {
    ModelConfig {
        text_dim: None,
        image_dim: None,
        num_classes: None,
        ..tiny_config()
    }
    .resolve(ds.text_dim, ds.image_dim, ds.num_classes)
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let ds = random_dataset(24, 6, 10, 3, 1);
    let cfg = TrainConfig {
        lr: 0.0,
        ..tiny_train_config()
    };
    let outcome = train(&model_for(&ds), &cfg, &ds).unwrap();
    let fresh = ModelParams::new(&model_for(&ds)).unwrap();
    assert_eq!(outcome.model.store, fresh.store);

    let mut trainer = Trainer::new(fresh.clone(), 0.01, 0);
    let batch = Batch::from_records(&ds.records[..5]).unwrap();
    for _ in 0..3 {
        trainer.train_step(&batch, 0.0, 1).unwrap();
    }
    for ((_, _, a), (_, _, b)) in trainer.model.store.iter().zip(fresh.store.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn same_seed_same_run() {
    let ds = random_dataset(32, 6, 10, 3, 2);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..tiny_train_config()
    };
    let a = train(&model_for(&ds), &cfg, &ds).unwrap();
    let b = train(&model_for(&ds), &cfg, &ds).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let c = train(&model_for(&ds), &TrainConfig { seed: 1, ..cfg }, &ds).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn best_epoch_parameters_are_kept() {
    let ds = random_dataset(32, 6, 10, 3, 3);
    let cfg = TrainConfig {
        lr: 0.3,
        max_epochs: 6,
        early_stop_patience: 6,
        ..tiny_train_config()
    };
    let out = train(&model_for(&ds), &cfg, &ds).unwrap();
    let best = out.log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.log[out.best_epoch - 1].val_loss, best);
    let (_, val) = coattendwg::data::split(&ds, 0.75, cfg.seed).unwrap();
    let loss = {
        let batch = Batch::from_records(&val.records).unwrap();
        out.model.loss(&batch).unwrap()
    };
    assert!((loss - best).abs() < 1e-12);
}

#[test]
fn learns_a_separable_task() {
    let spec = SyntheticSpec {
        task: "linear".parse().unwrap(),
        ..SyntheticSpec::xor(200, 0.2, 4)
    };
    let ds = synth_generate(&spec).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 10,
        ..tiny_train_config()
    };
    let out = train(&model_for(&ds), &cfg, &ds).unwrap();
    assert!(out.log.last().unwrap().val_accuracy > 0.95, "{:?}", out.log);
    assert!(evaluate(&out.model, &ds).unwrap().accuracy > 0.95);
}

#[test]
fn divergence_is_reported() {
    let ds = random_dataset(8, 6, 10, 3, 5);
    let mut model = ModelParams::new(&model_for(&ds)).unwrap();
    let id = model.store.find("classifier.bias").unwrap();
    model.store.set(id, Tensor::new(vec![3], vec![f64::MAX, -f64::MAX, 0.0]).unwrap()).unwrap();
    let mut trainer = Trainer::new(model, 0.0, 0);
    let batch = Batch::from_records(&ds.records).unwrap();
    assert!(matches!(trainer.train_step(&batch, 1e-3, 1), Err(Error::Diverged { .. })));
}

#[test]
fn invalid_train_configs() {
    let ds = random_dataset(8, 6, 10, 3, 6);
    for bad in [
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { val_fraction: 1.0, ..TrainConfig::default() },
        TrainConfig { max_epochs: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(&model_for(&ds), &bad, &ds), Err(Error::Config(_))));
    }
    assert!(train(&model_for(&ds), &TrainConfig::default(), &ds.subset(&[])).is_err());
}

#[test]
fn epoch_log_lines_are_json() {
    let rec = EpochRecord {
        epoch: 3,
        lr: 2e-5,
        train_loss: 0.1 + 0.2,
        val_loss: f64::NAN,
        val_accuracy: 0.5,
        val_macro_f1: 1.0 / 3.0,
    };
    let v: serde_json::Value = serde_json::from_str(&rec.to_json_line()).unwrap();
    assert_eq!(v["epoch"], 3);
    assert_eq!(v["train_loss"].as_f64().unwrap(), 0.1 + 0.2);
    assert_eq!(v["val_macro_f1"].as_f64().unwrap(), 1.0 / 3.0);
    assert!(v["val_loss"].is_null());
}
