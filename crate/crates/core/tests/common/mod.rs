//! The overfit toy target shared by the integration tests: 4 Gaussian
//! classes in 8 dimensions, 200 members and 200 nonmembers, and a
//! Dense/ReLU net with two hidden layers of 32 trained to zero train error.
#![allow(dead_code)]

use mialab::data::{make_synthetic_dataset, DatasetSplit, SyntheticSpec};
use mialab::training::{train_centralized, TrainOutcome, TrainingConfig};
use mialab::Architecture;

pub fn toy_dataset() -> SyntheticSpec {
    SyntheticSpec { num_classes: 4, dim: 8, per_class: 50, separation: 1.5, finetune_per_class: 25 }
}

pub fn toy_arch() -> Architecture {
    Architecture::classifier(8, &[32, 32], 4).unwrap()
}

pub fn toy_training(epochs: usize) -> TrainingConfig {
    TrainingConfig { epochs, batch_size: 16, lr: 0.05, seed: 0, snapshot_epochs: vec![] }
}

pub fn toy_target(seed: u64) -> (DatasetSplit, TrainOutcome) {
    let split = make_synthetic_dataset(&toy_dataset(), seed).unwrap();
    let cfg = TrainingConfig { seed, ..toy_training(300) };
    let out = train_centralized(&toy_arch(), &split.members, &cfg).unwrap();
    (split, out)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
