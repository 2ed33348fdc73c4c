//! Centralized mini-batch SGD with epoch snapshots, and fine-tuning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{to_batch, Sample};
use crate::error::{MiaError, Result};
use crate::nn::{batch_gradient, forward, sgd_step, Architecture, ModelSnapshot};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Epochs (1-based) after which a snapshot is captured.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MiaError::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MiaError::config("lr must be positive"));
        }
        if self.snapshot_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MiaError::config("snapshot_epochs must be strictly increasing"));
        }
        if let Some(&bad) = self.snapshot_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(MiaError::config(format!("snapshot epoch {bad} outside [1, {}]", self.epochs)));
        }
        Ok(())
    }
}

/// Snapshots tagged by epoch, strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapshotSeries(Vec<ModelSnapshot>);

impl SnapshotSeries {
    pub fn snapshots(&self) -> &[ModelSnapshot] {
        &self.0
    }

    pub fn get(&self, tag: u64) -> Option<&ModelSnapshot> {
        self.0.iter().find(|s| s.tag() == tag)
    }

    fn push(&mut self, snap: ModelSnapshot) {
        debug_assert!(self.0.last().is_none_or(|last| last.tag() < snap.tag()));
        self.0.push(snap);
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelSnapshot,
    pub series: SnapshotSeries,
    pub train_accuracy: f64,
}

/// Fraction of samples whose arg-max prediction matches the label.
pub fn accuracy(model: &ModelSnapshot, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MiaError::input("accuracy of an empty sample set"));
    }
    let (batch, labels) = to_batch(samples)?;
    let trace = forward(model, &batch, &labels)?;
    let probs = trace.probabilities();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

pub fn mean_loss(model: &ModelSnapshot, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MiaError::input("loss of an empty sample set"));
    }
    let (batch, labels) = to_batch(samples)?;
    let trace = forward(model, &batch, &labels)?;
    Ok(trace.losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One pass over `samples` in a freshly shuffled order. The final partial
/// batch is kept.
pub(crate) fn run_epoch(
    model: ModelSnapshot,
    samples: &[Sample],
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<ModelSnapshot> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut model = model;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
        let (x, y) = to_batch(&batch)?;
        let (loss, grads) = batch_gradient(&model, &x, &y)?;
        if !loss.is_finite() {
            return Err(MiaError::numeric("training loss diverged"));
        }
        let params = sgd_step(model.params(), grads.tensors(), lr)?;
        model = model.with_params(params, model.tag())?;
    }
    Ok(model)
}

fn check_samples(model: &ModelSnapshot, samples: &[Sample]) -> Result<()> {
    let arch = model.arch();
    for s in samples {
        if s.x.len() != arch.input_dim() {
            return Err(MiaError::shape(format!(
                "sample has {} features, model expects {}",
                s.x.len(),
                arch.input_dim()
            )));
        }
        if s.y >= arch.output_dim() {
            return Err(MiaError::shape(format!("label {} outside the model's classes", s.y)));
        }
    }
    Ok(())
}

/// Continues SGD from `start` for `cfg.epochs` epochs. Tags advance by one
/// per epoch from `start.tag()`.
fn train_from(start: ModelSnapshot, samples: &[Sample], cfg: &TrainingConfig) -> Result<(ModelSnapshot, SnapshotSeries)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(MiaError::input("training set is empty"));
    }
    check_samples(&start, samples)?;
    let mut rng = rng::stream(cfg.seed, &[rng::label::SHUFFLE]);
    let base_tag = start.tag();
    let mut model = start;
    let mut series = SnapshotSeries::default();
    for epoch in 1..=cfg.epochs {
        model = run_epoch(model, samples, cfg.batch_size, cfg.lr, &mut rng)?;
        model = model.with_tag(base_tag + epoch as u64);
        if cfg.snapshot_epochs.binary_search(&epoch).is_ok() {
            series.push(model.clone());
        }
    }
    Ok((model, series))
}

/// Trains a fresh model (initialized from `cfg.seed`) on the members only.
pub fn train_centralized(arch: &Architecture, members: &[Sample], cfg: &TrainingConfig) -> Result<TrainOutcome> {
    let init = ModelSnapshot::initialize(arch, cfg.seed);
    let (model, series) = train_from(init, members, cfg)?;
    let train_accuracy = accuracy(&model, members)?;
    Ok(TrainOutcome { model, series, train_accuracy })
}

/// Continues training `base` on `finetune` only, returning the new version.
pub fn fine_tune(base: &ModelSnapshot, finetune: &[Sample], cfg: &TrainingConfig) -> Result<ModelSnapshot> {
    train_from(base.clone(), finetune, cfg).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SyntheticSpec};

    fn cfg(epochs: usize) -> TrainingConfig {
        TrainingConfig { epochs, batch_size: 16, lr: 0.1, seed: 3, snapshot_epochs: vec![] }
    }

    fn blobs() -> Vec<Sample> {
        let spec = SyntheticSpec { num_classes: 2, dim: 2, per_class: 50, separation: 3.0, finetune_per_class: 0 };
        make_synthetic_dataset(&spec, 1).unwrap().members
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let arch = Architecture::classifier(2, &[8], 2).unwrap();
        let out = train_centralized(&arch, &blobs(), &cfg(0)).unwrap();
        assert_eq!(out.model, ModelSnapshot::initialize(&arch, 3));
        assert!(out.series.snapshots().is_empty());
    }

    #[test]
    fn snapshots_taken_at_requested_epochs() {
        let arch = Architecture::classifier(2, &[8], 2).unwrap();
        let mut c = cfg(5);
        c.snapshot_epochs = vec![2, 5];
        let out = train_centralized(&arch, &blobs(), &c).unwrap();
        let tags: Vec<u64> = out.series.snapshots().iter().map(ModelSnapshot::tag).collect();
        assert_eq!(tags, vec![2, 5]);
        assert_eq!(out.series.get(5), Some(&out.model));
    }

    #[test]
    fn rejects_invalid_config_and_empty_data() {
        let arch = Architecture::classifier(2, &[8], 2).unwrap();
        let mut c = cfg(3);
        c.snapshot_epochs = vec![4];
        assert!(train_centralized(&arch, &blobs(), &c).is_err());
        assert!(matches!(train_centralized(&arch, &[], &cfg(3)), Err(MiaError::Input(_))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let arch = Architecture::classifier(2, &[8], 2).unwrap();
        let mut samples = blobs();
        for s in &mut samples {
            s.x.iter_mut().for_each(|v| *v *= 1e150);
        }
        let mut c = cfg(50);
        c.lr = 1e150;
        assert!(matches!(train_centralized(&arch, &samples, &c), Err(MiaError::Numeric(_))));
    }

    #[test]
    fn fine_tune_zero_epochs_keeps_params() {
        let arch = Architecture::classifier(2, &[8], 2).unwrap();
        let base = train_centralized(&arch, &blobs(), &cfg(3)).unwrap().model;
        let tuned = fine_tune(&base, &blobs()[..10], &cfg(0)).unwrap();
        assert_eq!(tuned.params(), base.params());
        assert!(fine_tune(&base, &[], &cfg(1)).is_err());
    }

    #[test]
    fn argmax_first_wins_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
