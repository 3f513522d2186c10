use std::collections::BTreeMap;

use crackseg::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use crackseg::data::{DatasetSplit, ImageSample, Part};
use crackseg::lp_pooling::PoolingSpec;
use crackseg::model::{CrackNet, ModelConfig};
use crackseg::synthetic::line_vs_noise;
use crackseg::train::{evaluate, train, BnMode, TrainConfig};
use crackseg::Error;

fn model(divisor: usize, seed: u64) -> CrackNet {
    CrackNet::random(ModelConfig {
        width_divisor: divisor,
        pooling: PoolingSpec::infinity(),
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn samples(n: usize) -> Vec<ImageSample> {
    line_vs_noise(n, 21).into_iter().map(|c| c.sample).collect()
}

fn split(train: std::ops::Range<usize>, val: std::ops::Range<usize>) -> DatasetSplit {
    DatasetSplit {
        train: train.collect(),
        val: val.clone().collect(),
        test: val.collect(),
        seed: 0,
        by_module: false,
    }
}

fn quick(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: lr,
        early_stop_patience: 0,
        augment: false,
        eval_batch_size: 8,
        ..Default::default()
    }
}

fn weights(m: &CrackNet) -> Vec<Vec<f32>> {
    m.named_tensors().into_iter().map(|t| t.data.to_vec()).collect()
}

#[test]
fn zero_learning_rate_is_identity_with_frozen_bn() {
    let data = samples(8);
    let mut m = model(64, 1);
    let before = weights(&m);
    let cfg = TrainConfig {
        bn_mode: BnMode::Frozen,
        ..quick(3, 0.0)
    };
    let h = train(&mut m, &data, &split(0..8, 0..8), &cfg).unwrap();
    assert_eq!(weights(&m), before);
    let first = &h.records[0];
    for r in &h.records {
        assert!((r.val_loss - first.val_loss).abs() < 1e-7);
        assert!((r.train_loss - first.train_loss).abs() < 1e-7);
        assert_eq!(r.val_metrics, first.val_metrics);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_with_fine_tuned_bn() {
    let data = samples(8);
    let mut m = model(64, 2);
    let before: Vec<Vec<f32>> = m.params_mut().into_iter().map(|p| p.value.clone()).collect();
    train(&mut m, &data, &split(0..8, 0..8), &quick(2, 0.0)).unwrap();
    let after: Vec<Vec<f32>> = m.params_mut().into_iter().map(|p| p.value.clone()).collect();
    assert_eq!(after, before);
}

#[test]
fn same_seed_same_result() {
    let data = samples(12);
    let run = || {
        let mut m = model(64, 3);
        let h = train(&mut m, &data, &split(0..8, 8..12), &quick(3, 1e-3)).unwrap();
        (h, weights(&m))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a.best_epoch, b.best_epoch);
    assert!((a.best().unwrap().val_loss - b.best().unwrap().val_loss).abs() < 1e-5);
    assert_eq!(wa, wb);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let data = samples(12);
    let mut m = model(64, 4);
    let s = split(0..8, 8..12);
    train(&mut m, &data, &s, &quick(2, 1e-3)).unwrap();
    let test = s.samples(&data, Part::Test);
    let report = evaluate(&m, &test, 4).unwrap();
    let bytes = checkpoint_bytes(&m, &BTreeMap::new()).unwrap();
    let loaded = checkpoint_from_bytes(&bytes, Some(m.config())).unwrap();
    assert_eq!(evaluate(&loaded.model, &test, 3).unwrap(), report);
}

#[test]
fn best_epoch_weights_are_restored() {
    let data = samples(12);
    let mut m = model(64, 5);
    let s = split(0..8, 8..12);
    let h = train(&mut m, &data, &s, &quick(4, 3e-3)).unwrap();
    let val = s.samples(&data, Part::Val);
    let eval = crackseg::train::evaluate_with_loss(&m, &val, 4).unwrap();
    assert!((eval.loss - h.best().unwrap().val_loss).abs() < 1e-9);
}

#[test]
fn held_out_loss_drops_over_first_five_epochs() {
    let data = samples(48);
    let mut m = model(16, 6);
    let cfg = TrainConfig {
        batch_size: 8,
        bn_mode: crackseg::train::BnMode::Frozen,
        ..quick(5, 1e-3)
    };
    let h = train(&mut m, &data, &split(0..40, 40..48), &cfg).unwrap();
    let losses: Vec<f64> = h.records.iter().map(|r| r.val_loss).collect();
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn non_finite_weights_report_divergence() {
    let data = samples(8);
    let mut m = model(64, 7);
    m.head_mut().weight.value[0] = f32::NAN;
    let err = train(&mut m, &data, &split(0..8, 0..8), &quick(2, 1e-3)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, batch: 0 }), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let data = samples(8);
    let mut m = model(64, 8);
    assert!(train(&mut m, &data, &split(0..8, 0..8), &quick(0, 1e-3)).is_err());
    let empty_val = DatasetSplit {
        val: vec![],
        ..split(0..8, 0..8)
    };
    assert!(train(&mut m, &data, &empty_val, &quick(1, 1e-3)).is_err());
    let cfg = TrainConfig {
        batch_size: 0,
        ..quick(1, 1e-3)
    };
    assert!(train(&mut m, &data, &split(0..8, 0..8), &cfg).is_err());
}
