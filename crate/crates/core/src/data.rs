//! Labeled samples, the member/nonmember/fine-tune split, and the synthetic
//! Gaussian-blob generator that stands in for an image dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MiaError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// Stacks samples into a `[n, dim]` batch plus their labels.
pub fn to_batch(samples: &[Sample]) -> Result<(Tensor, Vec<usize>)> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let labels = samples.iter().map(|s| s.y).collect();
    Ok((Tensor::from_rows(&rows)?, labels))
}

/// Training members `D`, disjoint nonmembers `D'`, and an optional
/// fine-tuning set `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub members: Vec<Sample>,
    pub nonmembers: Vec<Sample>,
    #[serde(default)]
    pub finetune: Vec<Sample>,
    pub num_classes: usize,
    pub dim: usize,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(MiaError::config("dataset needs at least one class and one feature"));
        }
        for s in self.members.iter().chain(&self.nonmembers).chain(&self.finetune) {
            if s.x.len() != self.dim {
                return Err(MiaError::shape(format!("sample has {} features, expected {}", s.x.len(), self.dim)));
            }
            if s.y >= self.num_classes {
                return Err(MiaError::shape(format!("label {} outside [0, {})", s.y, self.num_classes)));
            }
            if !s.x.iter().all(|v| v.is_finite()) {
                return Err(MiaError::numeric("non-finite feature value"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Samples per class in each of the member and nonmember halves.
    pub per_class: usize,
    /// Euclidean distance between any two class means.
    pub separation: f64,
    /// Samples per class in the fine-tuning set.
    #[serde(default)]
    pub finetune_per_class: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(MiaError::config("dataset counts must be positive"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(MiaError::config("separation must be a nonnegative finite number"));
        }
        Ok(())
    }
}

/// Class means at pairwise distance `separation`. With at most `dim` classes
/// the means sit on scaled coordinate axes (an exact simplex); otherwise they
/// are seeded random directions on the sphere of the same radius, so the
/// distance holds only approximately.
fn class_means(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let radius = spec.separation / std::f64::consts::SQRT_2;
    (0..spec.num_classes)
        .map(|k| {
            if spec.num_classes <= spec.dim {
                let mut m = vec![0.0; spec.dim];
                m[k] = radius;
                m
            } else {
                let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|a| a * radius / norm).collect()
            }
        })
        .collect()
}

fn draw(means: &[Vec<f64>], per_class: usize, rng: &mut Rng) -> Vec<Sample> {
    let mut out = Vec::with_capacity(means.len() * per_class);
    for (y, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let x = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + z
                })
                .collect();
            out.push(Sample { x, y });
        }
    }
    out.shuffle(rng);
    out
}

/// Unit-variance Gaussian class clusters. Members, nonmembers and the
/// fine-tuning set are independent draws from the same distribution.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[rng::label::DATA]);
    let means = class_means(spec, &mut rng);
    let members = draw(&means, spec.per_class, &mut rng);
    let nonmembers = draw(&means, spec.per_class, &mut rng);
    let finetune = draw(&means, spec.finetune_per_class, &mut rng);
    Ok(DatasetSplit { members, nonmembers, finetune, num_classes: spec.num_classes, dim: spec.dim })
}

/// Member sets for each federated participant plus a shared nonmember pool,
/// all drawn independently from the same class clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedSplit {
    pub participants: Vec<Vec<Sample>>,
    pub nonmembers: Vec<Sample>,
    pub num_classes: usize,
    pub dim: usize,
}

/// `spec.per_class` samples per class for every participant and for the
/// nonmember pool.
pub fn make_federated_dataset(spec: &SyntheticSpec, participants: usize, seed: u64) -> Result<FederatedSplit> {
    spec.validate()?;
    if participants == 0 {
        return Err(MiaError::config("need at least one participant"));
    }
    let mut rng = rng::stream(seed, &[rng::label::DATA]);
    let means = class_means(spec, &mut rng);
    let sets = (0..participants).map(|_| draw(&means, spec.per_class, &mut rng)).collect();
    let nonmembers = draw(&means, spec.per_class, &mut rng);
    Ok(FederatedSplit { participants: sets, nonmembers, num_classes: spec.num_classes, dim: spec.dim })
}

/// Splits `members` into `parts` disjoint, nearly equal shards.
pub fn shard(samples: &[Sample], parts: usize) -> Vec<Vec<Sample>> {
    let mut out = vec![Vec::new(); parts];
    for (i, s) in samples.iter().enumerate() {
        out[i % parts].push(s.clone());
    }
    out
}

/// Random sample of `count` items without replacement, in draw order.
pub fn choose<T: Clone>(items: &[T], count: usize, rng: &mut Rng) -> Vec<T> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// One sample per line: comma-separated features followed by the label.
pub fn write_samples_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        for v in &s.x {
            write!(text, "{v:?},").expect("write to string");
        }
        writeln!(text, "{}", s.y).expect("write to string");
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<Sample>> {
    parse_samples_csv(&fs::read_to_string(path)?)
}

pub fn parse_samples_csv(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (label, features) = fields.split_last().expect("split yields at least one field");
        let bad = |what: &str| MiaError::Format(format!("line {}: bad {what}", line_no + 1));
        let y = label.parse::<usize>().map_err(|_| bad("label"))?;
        let x = features
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        if x.is_empty() {
            return Err(bad("row (no features)"));
        }
        out.push(Sample { x, y });
    }
    Ok(out)
}

/// Writes `members.csv`, `nonmembers.csv`, `finetune.csv` and `dataset.json`
/// (class count and dimension) into `dir`.
pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_samples_csv(&dir.join("members.csv"), &split.members)?;
    write_samples_csv(&dir.join("nonmembers.csv"), &split.nonmembers)?;
    write_samples_csv(&dir.join("finetune.csv"), &split.finetune)?;
    let meta = serde_json::json!({ "num_classes": split.num_classes, "dim": split.dim });
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    #[derive(Deserialize)]
    struct Meta {
        num_classes: usize,
        dim: usize,
    }
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    let finetune_path = dir.join("finetune.csv");
    let split = DatasetSplit {
        members: read_samples_csv(&dir.join("members.csv"))?,
        nonmembers: read_samples_csv(&dir.join("nonmembers.csv"))?,
        finetune: if finetune_path.exists() { read_samples_csv(&finetune_path)? } else { Vec::new() },
        num_classes: meta.num_classes,
        dim: meta.dim,
    };
    split.validate()?;
    Ok(split)
}
