//! Run-level configuration. One TOML document describes a whole experiment;
//! the CLI subcommands read the parts they need from the same file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackNetSpec, AttackTrainConfig};
use crate::data::SyntheticSpec;
use crate::error::{MiaError, Result};
use crate::features::FeatureConfig;
use crate::nn::Architecture;
use crate::training::TrainingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Attack on the output of each of the last three layers separately.
    LayerDepth,
    /// Default features against output-only and gradient-only features.
    OutputsVsGradients,
    /// Attack on a model and its fine-tuned successor.
    FineTune,
    /// Global passive attack observing early to late training rounds.
    FlStages,
    /// Passive, active and isolating server attackers and a local attacker.
    FlPlacement,
    /// Spectral clustering of gradient norms, trained and untrained target.
    UnsupervisedCentralized,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Self::LayerDepth,
        Self::OutputsVsGradients,
        Self::FineTune,
        Self::FlStages,
        Self::FlPlacement,
        Self::UnsupervisedCentralized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LayerDepth => "layer-depth",
            Self::OutputsVsGradients => "outputs-vs-gradients",
            Self::FineTune => "fine-tune",
            Self::FlStages => "fl-stages",
            Self::FlPlacement => "fl-placement",
            Self::UnsupervisedCentralized => "unsupervised-centralized",
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Self::FlStages | Self::FlPlacement)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// Hidden ReLU widths between the input and the softmax classifier.
    pub hidden: Vec<usize>,
}

/// Federated settings. Participant member sets hold `dataset.per_class`
/// samples per class each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSpec {
    pub participants: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub victim: usize,
    /// Local attacker; defaults to the last participant.
    #[serde(default)]
    pub observer: Option<usize>,
    /// Ascent step of the active attacker; defaults to `lr`.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Observation window of the placement scenario; defaults to the last
    /// five rounds.
    #[serde(default)]
    pub observation_rounds: Vec<usize>,
    #[serde(default)]
    pub parallel: bool,
}

impl FlSpec {
    pub fn observer(&self) -> usize {
        self.observer.unwrap_or(self.participants.saturating_sub(1))
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(self.lr)
    }

    pub fn window(&self) -> Vec<usize> {
        if self.observation_rounds.is_empty() {
            (self.rounds.saturating_sub(4).max(1)..=self.rounds).collect()
        } else {
            self.observation_rounds.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.participants < 2 {
            return Err(MiaError::config("fl.participants must be at least 2"));
        }
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(MiaError::config("fl.rounds, fl.local_epochs and fl.batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MiaError::config("fl.lr must be positive"));
        }
        if self.victim >= self.participants || self.observer() >= self.participants {
            return Err(MiaError::config("fl.victim and fl.observer must name participants"));
        }
        if self.observer() == self.victim {
            return Err(MiaError::config("the local attacker cannot be the victim"));
        }
        if !(self.gamma() > 0.0 && self.gamma().is_finite()) {
            return Err(MiaError::config("fl.gamma must be positive"));
        }
        let w = &self.observation_rounds;
        if w.windows(2).any(|p| p[0] >= p[1]) || w.iter().any(|&r| r == 0 || r > self.rounds) {
            return Err(MiaError::config(format!("fl.observation_rounds must increase within [1, {}]", self.rounds)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub dataset: SyntheticSpec,
    pub arch: ArchSpec,
    /// Target training; required by the centralized scenarios.
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    /// Continued training on the fine-tuning set; required by `fine-tune`.
    #[serde(default)]
    pub finetune: Option<TrainingConfig>,
    /// Required by the federated scenarios.
    #[serde(default)]
    pub fl: Option<FlSpec>,
    /// Replaces the default feature selection where a scenario uses it.
    #[serde(default)]
    pub features: Option<FeatureConfig>,
    #[serde(default)]
    pub attack: AttackTrainConfig,
    #[serde(default)]
    pub attack_net: AttackNetSpec,
    /// Run seeds concurrently. Results do not depend on it.
    #[serde(default)]
    pub parallel_seeds: bool,
}

impl ExperimentSpec {
    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::classifier(self.dataset.dim, &self.arch.hidden, self.dataset.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let arch = self.architecture()?;
        self.attack.validate()?;
        if self.attack_net.submodule_hidden.contains(&0) || self.attack_net.encoder_hidden.contains(&0) {
            return Err(MiaError::config("attack network widths must be positive"));
        }
        if let Some(f) = &self.features {
            f.validate(&arch)?;
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(MiaError::config("seeds must be distinct"));
        }
        if let Some(t) = &self.training {
            t.validate()?;
        }
        if let Some(t) = &self.finetune {
            t.validate()?;
        }
        if let Some(fl) = &self.fl {
            fl.validate()?;
        }
        let need = |present: bool, what: &str| {
            if present {
                Ok(())
            } else {
                Err(MiaError::config(format!("scenario {} needs a [{what}] section", self.scenario.name())))
            }
        };
        if self.scenario.is_federated() {
            need(self.fl.is_some(), "fl")?;
        } else {
            need(self.training.is_some(), "training")?;
        }
        if self.scenario == Scenario::FineTune {
            need(self.finetune.is_some(), "finetune")?;
            if self.dataset.finetune_per_class == 0 {
                return Err(MiaError::config("fine-tune needs dataset.finetune_per_class > 0"));
            }
        }
        if self.scenario == Scenario::FlStages {
            stage_rounds(self.fl.as_ref().expect("checked").rounds)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| MiaError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MiaError::Format(e.to_string()))
    }
}

/// Observation sets at rounds 5..25, 10..50, 50..200 and 100..300 of a
/// 300-round run, rescaled to `rounds`. Collisions after rounding are pushed
/// one round later so every set keeps its size.
pub fn stage_rounds(rounds: usize) -> Result<Vec<Vec<usize>>> {
    const BASE: [&[usize]; 4] = [
        &[5, 10, 15, 20, 25],
        &[10, 20, 30, 40, 50],
        &[50, 100, 150, 200],
        &[100, 150, 200, 250, 300],
    ];
    if rounds < 10 {
        return Err(MiaError::config("fl-stages needs at least 10 rounds"));
    }
    let mut sets = Vec::new();
    for base in BASE {
        let mut set: Vec<usize> = Vec::with_capacity(base.len());
        for &r in base {
            let mut scaled = ((r * rounds) as f64 / 300.0).round().max(1.0) as usize;
            if let Some(&prev) = set.last() {
                scaled = scaled.max(prev + 1);
            }
            set.push(scaled);
        }
        // Pull an overflowing tail back inside the budget.
        let over = set.last().copied().unwrap_or(0).saturating_sub(rounds);
        if over > 0 {
            for (i, r) in set.iter_mut().rev().enumerate() {
                *r = (*r).min(rounds - i);
            }
        }
        sets.push(set);
    }
    Ok(sets)
}
