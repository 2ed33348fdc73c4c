//! Supervised membership attack: one fully connected submodule per feature
//! segment, an encoder over the concatenated submodule outputs, and a single
//! logistic score unit. Trained with binary cross-entropy.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MiaError, Result};
use crate::features::{feature_vector, FeatureGeometry, WhiteBoxFeatures};
use crate::nn::{activations, backprop, sgd_step, Architecture, Gradients, ModelSnapshot};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackNetSpec {
    /// Hidden ReLU widths of every segment submodule.
    pub submodule_hidden: Vec<usize>,
    /// Hidden ReLU widths of the encoder, before its scalar output.
    pub encoder_hidden: Vec<usize>,
}

impl Default for AttackNetSpec {
    fn default() -> Self {
        Self { submodule_hidden: vec![64, 64], encoder_hidden: vec![64, 64] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of each membership class the attacker knows (and trains on).
    pub train_fraction: f64,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 16, lr: 0.05, seed: 0, train_fraction: 0.5 }
    }
}

impl AttackTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MiaError::config("attack batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MiaError::config("attack lr must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(MiaError::config("train_fraction must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

/// Per-dimension mean and standard deviation of the attacker's training
/// features. Constant dimensions get a unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipPrediction {
    pub score: f64,
    /// `score >= 0.5`; a score of exactly one half counts as a member.
    pub member: bool,
}

impl MembershipPrediction {
    fn from_score(score: f64) -> Self {
        Self { score, member: score >= 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel {
    pub spec: AttackNetSpec,
    pub geometry: FeatureGeometry,
    pub submodules: Vec<ModelSnapshot>,
    pub encoder: ModelSnapshot,
    pub standardization: Standardization,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[t log s(z) + (1 - t) log(1 - s(z))]` without forming `s(z)`.
fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

struct Pass {
    inputs: Vec<Tensor>,
    sub_acts: Vec<Vec<Tensor>>,
    concat: Tensor,
    enc_acts: Vec<Tensor>,
}

impl Pass {
    fn logits(&self) -> &[f64] {
        self.enc_acts.last().expect("encoder has layers").data()
    }
}

impl AttackModel {
    fn init(spec: &AttackNetSpec, geometry: &FeatureGeometry, standardization: Standardization, seed: u64) -> Result<Self> {
        if spec.submodule_hidden.is_empty() {
            return Err(MiaError::config("submodules need at least one hidden layer"));
        }
        if geometry.segments.is_empty() {
            return Err(MiaError::config("feature geometry has no segments"));
        }
        let submodules = geometry
            .segments
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                let arch = Architecture::relu_stack(seg.len, &spec.submodule_hidden, None)?;
                Ok(ModelSnapshot::initialize(&arch, rng::derive_seed(seed, &[i as u64])))
            })
            .collect::<Result<Vec<_>>>()?;
        let width = spec.submodule_hidden.last().expect("checked") * submodules.len();
        let enc_arch = Architecture::relu_stack(width, &spec.encoder_hidden, Some(1))?;
        let encoder = ModelSnapshot::initialize(&enc_arch, rng::derive_seed(seed, &[u64::MAX]));
        Ok(Self { spec: spec.clone(), geometry: geometry.clone(), submodules, encoder, standardization })
    }

    fn forward(&self, rows: &[Vec<f64>]) -> Result<Pass> {
        let n = rows.len();
        let mut inputs = Vec::with_capacity(self.submodules.len());
        let mut sub_acts = Vec::with_capacity(self.submodules.len());
        for (seg, sub) in self.geometry.segments.iter().zip(&self.submodules) {
            let mut data = Vec::with_capacity(n * seg.len);
            for r in rows {
                data.extend_from_slice(&r[seg.offset..seg.offset + seg.len]);
            }
            let x = Tensor::new(vec![n, seg.len], data)?;
            sub_acts.push(activations(sub, &x)?);
            inputs.push(x);
        }
        let width = self.encoder.arch().input_dim();
        let mut concat = Vec::with_capacity(n * width);
        for i in 0..n {
            for acts in &sub_acts {
                concat.extend_from_slice(acts.last().expect("non-empty").row(i));
            }
        }
        let concat = Tensor::new(vec![n, width], concat)?;
        let enc_acts = activations(&self.encoder, &concat)?;
        Ok(Pass { inputs, sub_acts, concat, enc_acts })
    }

    /// Gradients of the mean BCE over `rows` with respect to every
    /// submodule's and the encoder's parameters.
    fn gradients(&self, rows: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Vec<Gradients>, Gradients)> {
        let pass = self.forward(rows)?;
        let n = rows.len() as f64;
        let logits = pass.logits();
        let loss = logits.iter().zip(targets).map(|(&z, &t)| bce_with_logit(z, t)).sum::<f64>() / n;
        let delta: Vec<f64> = logits.iter().zip(targets).map(|(&z, &t)| (sigmoid(z) - t) / n).collect();
        let enc_len = self.encoder.arch().len();
        let (enc_grads, concat_grad) = backprop(&self.encoder, &pass.concat, &pass.enc_acts, enc_len, delta, true)?;
        let concat_grad = concat_grad.expect("requested");
        let width = pass.concat.cols();
        let mut sub_grads = Vec::with_capacity(self.submodules.len());
        let mut col = 0;
        for ((sub, acts), x) in self.submodules.iter().zip(&pass.sub_acts).zip(&pass.inputs) {
            let out_w = sub.arch().output_dim();
            let mut d = Vec::with_capacity(rows.len() * out_w);
            for i in 0..rows.len() {
                d.extend_from_slice(&concat_grad[i * width + col..i * width + col + out_w]);
            }
            col += out_w;
            let (g, _) = backprop(sub, x, acts, sub.arch().len(), d, false)?;
            sub_grads.push(g);
        }
        Ok((loss, sub_grads, enc_grads))
    }

    fn apply_step(&mut self, sub_grads: &[Gradients], enc_grads: &Gradients, lr: f64) -> Result<()> {
        for (sub, g) in self.submodules.iter_mut().zip(sub_grads) {
            *sub = sub.with_params(sgd_step(sub.params(), g.tensors(), lr)?, sub.tag())?;
        }
        self.encoder = self.encoder.with_params(sgd_step(self.encoder.params(), enc_grads.tensors(), lr)?, 0)?;
        Ok(())
    }

    fn check_geometry(&self, geometry: &FeatureGeometry) -> Result<()> {
        if geometry != &self.geometry {
            return Err(MiaError::shape("feature geometry differs from the attack model's training geometry"));
        }
        Ok(())
    }

    /// Scores raw (unstandardized) feature vectors laid out per the model's geometry.
    pub fn score_vectors(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let total = self.geometry.total_len();
        if let Some(r) = rows.iter().find(|r| r.len() != total) {
            return Err(MiaError::shape(format!("feature vector has {} entries, expected {total}", r.len())));
        }
        let standardized: Vec<Vec<f64>> = rows.iter().map(|r| self.standardization.apply(r)).collect();
        let pass = self.forward(&standardized)?;
        Ok(pass.logits().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Mean binary cross-entropy on already-standardized rows.
    pub fn loss_on(&self, standardized: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
        let pass = self.forward(standardized)?;
        Ok(pass.logits().iter().zip(targets).map(|(&z, &t)| bce_with_logit(z, t)).sum::<f64>() / standardized.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (i, sub) in self.submodules.iter().enumerate() {
            let name = format!("submodule_{i}.json");
            sub.save(&dir.join(&name))?;
            files.push(name);
        }
        self.encoder.save(&dir.join("encoder.json"))?;
        let sidecar = AttackSidecar {
            format: ATTACK_FORMAT.to_string(),
            spec: self.spec.clone(),
            geometry: self.geometry.clone(),
            standardization: self.standardization.clone(),
            submodules: files,
            encoder: "encoder.json".to_string(),
        };
        fs::write(dir.join("attack.json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: AttackSidecar = serde_json::from_str(&fs::read_to_string(dir.join("attack.json"))?)?;
        if sidecar.format != ATTACK_FORMAT {
            return Err(MiaError::Format(format!("unknown attack model format {:?}", sidecar.format)));
        }
        let submodules = sidecar
            .submodules
            .iter()
            .map(|f| ModelSnapshot::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let encoder = ModelSnapshot::load(&dir.join(&sidecar.encoder))?;
        if submodules.len() != sidecar.geometry.segments.len() {
            return Err(MiaError::Format("submodule count does not match geometry".into()));
        }
        Ok(Self { spec: sidecar.spec, geometry: sidecar.geometry, submodules, encoder, standardization: sidecar.standardization })
    }
}

const ATTACK_FORMAT: &str = "mialab-attack/1";

#[derive(Serialize, Deserialize)]
struct AttackSidecar {
    format: String,
    spec: AttackNetSpec,
    geometry: FeatureGeometry,
    standardization: Standardization,
    submodules: Vec<String>,
    encoder: String,
}

fn flatten_all(features: &[&WhiteBoxFeatures]) -> Result<(Vec<Vec<f64>>, FeatureGeometry)> {
    let mut rows = Vec::with_capacity(features.len());
    let mut geometry: Option<FeatureGeometry> = None;
    for f in features {
        let (v, g) = feature_vector(f);
        match &geometry {
            None => geometry = Some(g),
            Some(existing) if existing != &g => {
                return Err(MiaError::shape("samples were extracted with different feature geometries"));
            }
            Some(_) => {}
        }
        rows.push(v);
    }
    let geometry = geometry.ok_or_else(|| MiaError::input("no features"))?;
    Ok((rows, geometry))
}

/// Trains an attack model on flat feature vectors with known membership.
pub fn train_on_vectors(
    rows: &[Vec<f64>],
    members: &[bool],
    geometry: &FeatureGeometry,
    spec: &AttackNetSpec,
    cfg: &AttackTrainConfig,
) -> Result<AttackModel> {
    cfg.validate()?;
    if rows.len() != members.len() {
        return Err(MiaError::shape("one membership bit per feature vector required"));
    }
    if !members.iter().any(|&m| m) || members.iter().all(|&m| m) {
        return Err(MiaError::input("attack training data must contain both members and nonmembers"));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != geometry.total_len()) {
        return Err(MiaError::shape(format!("feature vector has {} entries, geometry {}", r.len(), geometry.total_len())));
    }
    let standardization = Standardization::fit(rows);
    let standardized: Vec<Vec<f64>> = rows.iter().map(|r| standardization.apply(r)).collect();
    let targets: Vec<f64> = members.iter().map(|&m| f64::from(u8::from(m))).collect();
    let mut model = AttackModel::init(spec, geometry, standardization, rng::derive_seed(cfg.seed, &[rng::label::INIT]))?;
    let mut rng = rng::stream(cfg.seed, &[rng::label::SHUFFLE]);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| standardized[i].clone()).collect();
            let t: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, sub_grads, enc_grads) = model.gradients(&batch, &t)?;
            if !loss.is_finite() {
                return Err(MiaError::numeric("attack training diverged"));
            }
            model.apply_step(&sub_grads, &enc_grads, cfg.lr)?;
        }
    }
    Ok(model)
}

/// Trains the attack on white-box features with known membership.
pub fn train_supervised_attack(
    labeled: &[(WhiteBoxFeatures, bool)],
    spec: &AttackNetSpec,
    cfg: &AttackTrainConfig,
) -> Result<AttackModel> {
    let refs: Vec<&WhiteBoxFeatures> = labeled.iter().map(|(f, _)| f).collect();
    let (rows, geometry) = flatten_all(&refs)?;
    let members: Vec<bool> = labeled.iter().map(|(_, m)| *m).collect();
    train_on_vectors(&rows, &members, &geometry, spec, cfg)
}

pub fn predict_membership(model: &AttackModel, features: &WhiteBoxFeatures) -> Result<MembershipPrediction> {
    let (v, g) = feature_vector(features);
    model.check_geometry(&g)?;
    Ok(MembershipPrediction::from_score(model.score_vectors(&[v])?[0]))
}

pub fn predict_batch(model: &AttackModel, features: &[WhiteBoxFeatures]) -> Result<Vec<MembershipPrediction>> {
    let refs: Vec<&WhiteBoxFeatures> = features.iter().collect();
    if refs.is_empty() {
        return Ok(Vec::new());
    }
    let (rows, g) = flatten_all(&refs)?;
    model.check_geometry(&g)?;
    Ok(model.score_vectors(&rows)?.into_iter().map(MembershipPrediction::from_score).collect())
}
