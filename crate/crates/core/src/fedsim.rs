//! Federated learning simulation: a parameter server averaging the uploads of
//! N participants that each run local SGD, with optional attackers placed at
//! the server (global) or at a participant (local).
//!
//! Every participant draws its shuffling randomness from a stream keyed by
//! `(participant seed, round)`, so a run is bit-identical whether the
//! participants of a round train serially or in parallel.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{to_batch, Sample};
use crate::error::{MiaError, Result};
use crate::nn::{ascent_step, batch_gradient, Architecture, ModelSnapshot};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::run_epoch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub num_participants: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Rounds (1-based) the attacker observes.
    #[serde(default)]
    pub observation_rounds: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Per-participant shuffle seeds; derived from `seed` when absent.
    #[serde(default)]
    pub participant_seeds: Option<Vec<u64>>,
    /// Train the participants of a round concurrently.
    #[serde(default)]
    pub parallel: bool,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_participants < 2 {
            return Err(MiaError::config("federated runs need at least two participants"));
        }
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(MiaError::config("rounds, local_epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MiaError::config("lr must be positive"));
        }
        if self.observation_rounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MiaError::config("observation_rounds must be strictly increasing"));
        }
        if let Some(&bad) = self.observation_rounds.iter().find(|&&r| r == 0 || r > self.rounds) {
            return Err(MiaError::config(format!("observation round {bad} outside [1, {}]", self.rounds)));
        }
        if let Some(seeds) = &self.participant_seeds {
            if seeds.len() != self.num_participants {
                return Err(MiaError::config("participant_seeds must list one seed per participant"));
            }
        }
        Ok(())
    }

    pub fn participant_seed(&self, id: usize) -> u64 {
        match &self.participant_seeds {
            Some(seeds) => seeds[id],
            None => rng::derive_seed(self.seed, &[rng::label::FEDERATED, id as u64]),
        }
    }

    /// First and last observation round, if any.
    fn window(&self) -> Option<(usize, usize)> {
        Some((*self.observation_rounds.first()?, *self.observation_rounds.last()?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttackerPlacement {
    None,
    /// Server-side observer of every upload.
    GlobalPassive,
    /// Server-side attacker that pushes the victim's distributed parameters
    /// up the loss of `targets` before each round of the observation window.
    /// With `isolate`, the victim is cut off from aggregation entirely.
    GlobalActive { gamma: f64, targets: Vec<Sample>, isolate: bool, victim: usize },
    /// A participant that only sees the successive global models.
    LocalPassive { observer: usize },
}

impl AttackerPlacement {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::GlobalPassive => "global-passive",
            Self::GlobalActive { isolate: false, .. } => "global-active",
            Self::GlobalActive { isolate: true, .. } => "global-active-isolate",
            Self::LocalPassive { .. } => "local-passive",
        }
    }

    pub fn validate(&self, num_participants: usize) -> Result<()> {
        match self {
            Self::GlobalActive { gamma, targets, victim, .. } => {
                if targets.is_empty() {
                    return Err(MiaError::config("active attack needs at least one target sample"));
                }
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return Err(MiaError::config("active attack needs gamma > 0"));
                }
                if *victim >= num_participants {
                    return Err(MiaError::config(format!("victim {victim} is not a participant")));
                }
            }
            Self::LocalPassive { observer } if *observer >= num_participants => {
                return Err(MiaError::config(format!("observer {observer} is not a participant")));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    Ascent { participant: usize, gamma: f64, targets: usize },
    Isolation { participant: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Parameters each participant started the round from.
    pub distributed: Vec<ModelSnapshot>,
    pub uploads: Vec<ModelSnapshot>,
    /// Server model after aggregation.
    pub global: ModelSnapshot,
    pub interventions: Vec<Intervention>,
}

/// Append-only transcript of a federated run.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    initial: ModelSnapshot,
    rounds: Vec<RoundRecord>,
}

impl RoundLog {
    pub fn initial(&self) -> &ModelSnapshot {
        &self.initial
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    /// Record of round `r` (1-based).
    pub fn round(&self, r: usize) -> Option<&RoundRecord> {
        r.checked_sub(1).and_then(|i| self.rounds.get(i))
    }

    /// Global model the server distributed at the start of round `r`.
    pub fn distributed_global(&self, r: usize) -> Option<&ModelSnapshot> {
        match r {
            0 => None,
            1 => Some(&self.initial),
            _ => self.round(r - 1).map(|rec| &rec.global),
        }
    }

    pub fn final_global(&self) -> &ModelSnapshot {
        self.rounds.last().map(|r| &r.global).unwrap_or(&self.initial)
    }

    fn push(&mut self, record: RoundRecord) {
        debug_assert_eq!(record.round, self.rounds.len() + 1);
        self.rounds.push(record);
    }
}

/// Elementwise arithmetic mean of shape-congruent parameter lists.
pub fn fedavg(uploads: &[&[Tensor]]) -> Result<Vec<Tensor>> {
    let first = uploads.first().ok_or_else(|| MiaError::input("no uploads to aggregate"))?;
    for (i, u) in uploads.iter().enumerate().skip(1) {
        if u.len() != first.len() || u.iter().zip(first.iter()).any(|(a, b)| !a.same_shape(b)) {
            return Err(MiaError::shape(format!("upload {i} does not match upload 0")));
        }
    }
    let n = uploads.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(t, tensor)| {
            let mut sum = vec![0.0; tensor.len()];
            for u in uploads {
                for (s, v) in sum.iter_mut().zip(u[t].data()) {
                    *s += v;
                }
            }
            sum.iter_mut().for_each(|s| *s /= n);
            Tensor::new(tensor.shape().to_vec(), sum)
        })
        .collect()
}

fn local_update(
    start: ModelSnapshot,
    samples: &[Sample],
    cfg: &FlConfig,
    participant: usize,
    round: usize,
) -> Result<ModelSnapshot> {
    let mut rng = rng::stream(cfg.participant_seed(participant), &[round as u64]);
    let mut model = start;
    for _ in 0..cfg.local_epochs {
        model = run_epoch(model, samples, cfg.batch_size, cfg.lr, &mut rng)?;
    }
    Ok(model.with_tag(round as u64))
}

/// Runs `cfg.rounds` rounds of federated averaging over the participants'
/// member sets. The initial global model is seeded from `cfg.seed`.
pub fn fl_run(
    arch: &Architecture,
    participants: &[Vec<Sample>],
    cfg: &FlConfig,
    placement: &AttackerPlacement,
) -> Result<RoundLog> {
    cfg.validate()?;
    placement.validate(cfg.num_participants)?;
    if participants.len() != cfg.num_participants {
        return Err(MiaError::config(format!(
            "{} participant datasets for {} participants",
            participants.len(),
            cfg.num_participants
        )));
    }
    if let Some(i) = participants.iter().position(Vec::is_empty) {
        return Err(MiaError::input(format!("participant {i} has no training data")));
    }

    let initial = ModelSnapshot::initialize(arch, rng::derive_seed(cfg.seed, &[rng::label::INIT]));
    let mut log = RoundLog { initial, rounds: Vec::with_capacity(cfg.rounds) };
    let window = cfg.window();
    let mut victim_last: Option<ModelSnapshot> = None;

    for round in 1..=cfg.rounds {
        let global = log.final_global().with_tag(round as u64 - 1);
        let mut distributed = vec![global.clone(); cfg.num_participants];
        let mut interventions = Vec::new();

        if let AttackerPlacement::GlobalActive { gamma, targets, isolate, victim } = placement {
            if *isolate {
                if let Some(own) = &victim_last {
                    distributed[*victim] = own.clone();
                }
                interventions.push(Intervention::Isolation { participant: *victim });
            }
            if window.is_some_and(|(lo, hi)| (lo..=hi).contains(&round)) {
                let (x, y) = to_batch(targets)?;
                let base = &distributed[*victim];
                let (_, grads) = batch_gradient(base, &x, &y)?;
                let params = ascent_step(base.params(), grads.tensors(), *gamma)?;
                distributed[*victim] = base.with_params(params, base.tag())?;
                interventions.push(Intervention::Ascent { participant: *victim, gamma: *gamma, targets: targets.len() });
            }
        }

        let train = |id: usize| local_update(distributed[id].clone(), &participants[id], cfg, id, round);
        let uploads: Vec<ModelSnapshot> = if cfg.parallel {
            (0..cfg.num_participants).into_par_iter().map(train).collect::<Result<_>>()?
        } else {
            (0..cfg.num_participants).map(train).collect::<Result<_>>()?
        };

        let excluded = match placement {
            AttackerPlacement::GlobalActive { isolate: true, victim, .. } => Some(*victim),
            _ => None,
        };
        let contributing: Vec<&[Tensor]> = uploads
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != excluded)
            .map(|(_, u)| u.params())
            .collect();
        let averaged = fedavg(&contributing)?;
        let new_global = global.with_params(averaged, round as u64)?;
        if let Some(v) = excluded {
            victim_last = Some(uploads[v].clone());
        }
        log.push(RoundRecord { round, distributed, uploads, global: new_global, interventions });
    }
    Ok(log)
}

/// The snapshots an attacker at `placement` sees at each listed round: every
/// participant's upload for global attackers, the distributed global model
/// for a local attacker. Each inner list is tagged with its round.
pub fn observe(log: &RoundLog, placement: &AttackerPlacement, rounds: &[usize]) -> Result<Vec<Vec<ModelSnapshot>>> {
    rounds
        .iter()
        .map(|&r| {
            let record = log.round(r).ok_or_else(|| MiaError::input(format!("round {r} is not in the log")))?;
            match placement {
                AttackerPlacement::GlobalPassive | AttackerPlacement::GlobalActive { .. } => {
                    Ok(record.uploads.iter().map(|u| u.with_tag(r as u64)).collect())
                }
                AttackerPlacement::LocalPassive { .. } => {
                    let global = log.distributed_global(r).expect("round exists");
                    Ok(vec![global.with_tag(r as u64)])
                }
                AttackerPlacement::None => Err(MiaError::config("no attacker is placed to observe")),
            }
        })
        .collect()
}

/// Snapshots describing `participant` across the observed rounds: its own
/// uploads for a global attacker, the shared global model for a local one.
pub fn observe_participant(
    log: &RoundLog,
    placement: &AttackerPlacement,
    rounds: &[usize],
    participant: usize,
) -> Result<Vec<ModelSnapshot>> {
    let sets = observe(log, placement, rounds)?;
    sets.into_iter()
        .map(|set| {
            if set.len() == 1 {
                Ok(set.into_iter().next().expect("len checked"))
            } else {
                set.into_iter()
                    .nth(participant)
                    .ok_or_else(|| MiaError::config(format!("participant {participant} not observed")))
            }
        })
        .collect()
}

const ROUNDLOG_FORMAT: &str = "mialab-roundlog/1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    initial: PathBuf,
    rounds: Vec<ManifestRound>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRound {
    round: usize,
    distributed: Vec<PathBuf>,
    uploads: Vec<PathBuf>,
    global: PathBuf,
    interventions: Vec<Intervention>,
}

/// Writes each snapshot of the log to its own file under `dir` plus an
/// `index.json` manifest mapping rounds to files and interventions.
pub fn write_round_log(dir: &Path, log: &RoundLog) -> Result<()> {
    fs::create_dir_all(dir)?;
    let initial = PathBuf::from("initial.json");
    log.initial.save(&dir.join(&initial))?;
    let mut rounds = Vec::with_capacity(log.rounds.len());
    for rec in &log.rounds {
        let sub = PathBuf::from(format!("round_{:04}", rec.round));
        fs::create_dir_all(dir.join(&sub))?;
        let save = |name: String, snap: &ModelSnapshot| -> Result<PathBuf> {
            let rel = sub.join(name);
            snap.save(&dir.join(&rel))?;
            Ok(rel)
        };
        let distributed = rec
            .distributed
            .iter()
            .enumerate()
            .map(|(i, s)| save(format!("distributed_{i}.json"), s))
            .collect::<Result<_>>()?;
        let uploads = rec
            .uploads
            .iter()
            .enumerate()
            .map(|(i, s)| save(format!("upload_{i}.json"), s))
            .collect::<Result<_>>()?;
        let global = save("global.json".to_string(), &rec.global)?;
        rounds.push(ManifestRound { round: rec.round, distributed, uploads, global, interventions: rec.interventions.clone() });
    }
    let manifest = Manifest { format: ROUNDLOG_FORMAT.to_string(), initial, rounds };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_round_log(dir: &Path) -> Result<RoundLog> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    if manifest.format != ROUNDLOG_FORMAT {
        return Err(MiaError::Format(format!("unknown round log format {:?}", manifest.format)));
    }
    let load = |p: &PathBuf| ModelSnapshot::load(&dir.join(p));
    let mut log = RoundLog { initial: load(&manifest.initial)?, rounds: Vec::new() };
    for (i, r) in manifest.rounds.iter().enumerate() {
        if r.round != i + 1 {
            return Err(MiaError::Format(format!("round {} listed at position {}", r.round, i + 1)));
        }
        log.push(RoundRecord {
            round: r.round,
            distributed: r.distributed.iter().map(load).collect::<Result<_>>()?,
            uploads: r.uploads.iter().map(load).collect::<Result<_>>()?,
            global: load(&r.global)?,
            interventions: r.interventions.clone(),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, shard, SyntheticSpec};

    fn setup() -> (Architecture, Vec<Vec<Sample>>, FlConfig) {
        let spec = SyntheticSpec { num_classes: 3, dim: 4, per_class: 12, separation: 2.0, finetune_per_class: 0 };
        let split = make_synthetic_dataset(&spec, 9).unwrap();
        let arch = Architecture::classifier(4, &[6], 3).unwrap();
        let cfg = FlConfig {
            num_participants: 3,
            rounds: 6,
            local_epochs: 2,
            batch_size: 4,
            lr: 0.1,
            observation_rounds: vec![4, 5, 6],
            seed: 21,
            participant_seeds: None,
            parallel: false,
        };
        (arch, shard(&split.members, 3), cfg)
    }

    #[test]
    fn fedavg_examples() {
        let twos = vec![Tensor::new(vec![2], vec![2.0, 2.0]).unwrap()];
        let zeros = vec![Tensor::zeros(vec![2])];
        let avg = fedavg(&[&zeros, &twos]).unwrap();
        assert_eq!(avg[0].data(), &[1.0, 1.0]);
        assert_eq!(fedavg(&[&twos, &twos]).unwrap(), twos);
        assert!(fedavg(&[]).is_err());
        assert!(fedavg(&[&twos, &[Tensor::zeros(vec![3])]]).is_err());
    }

    #[test]
    fn passive_placements_do_not_perturb_training() {
        let (arch, parts, cfg) = setup();
        let base = fl_run(&arch, &parts, &cfg, &AttackerPlacement::None).unwrap();
        let global = fl_run(&arch, &parts, &cfg, &AttackerPlacement::GlobalPassive).unwrap();
        let local = fl_run(&arch, &parts, &cfg, &AttackerPlacement::LocalPassive { observer: 2 }).unwrap();
        assert_eq!(base, global);
        assert_eq!(base, local);
    }

    #[test]
    fn identical_participants_upload_identical_models() {
        let (arch, parts, mut cfg) = setup();
        cfg.num_participants = 2;
        cfg.rounds = 1;
        cfg.observation_rounds = vec![];
        cfg.participant_seeds = Some(vec![5, 5]);
        let same = vec![parts[0].clone(), parts[0].clone()];
        let log = fl_run(&arch, &same, &cfg, &AttackerPlacement::None).unwrap();
        let rec = &log.rounds()[0];
        assert_eq!(rec.uploads[0], rec.uploads[1]);
        assert_eq!(rec.global.params(), rec.uploads[0].params());
    }

    #[test]
    fn observe_indexing() {
        let (arch, parts, cfg) = setup();
        let log = fl_run(&arch, &parts, &cfg, &AttackerPlacement::None).unwrap();
        assert!(observe(&log, &AttackerPlacement::GlobalPassive, &[]).unwrap().is_empty());
        let sets = observe(&log, &AttackerPlacement::GlobalPassive, &[3, 6]).unwrap();
        assert_eq!(sets.len(), 2);
        assert!(sets[0].iter().all(|s| s.tag() == 3));
        assert!(sets[1].iter().all(|s| s.tag() == 6));
        assert_eq!(sets[1].len(), 3);
        let local = observe(&log, &AttackerPlacement::LocalPassive { observer: 1 }, &[4]).unwrap();
        assert_eq!(local[0].len(), 1);
        assert_eq!(local[0][0].params(), log.round(3).unwrap().global.params());
        assert!(observe(&log, &AttackerPlacement::GlobalPassive, &[7]).is_err());
        assert!(observe(&log, &AttackerPlacement::None, &[1]).is_err());
    }

    #[test]
    fn invalid_placements_are_rejected() {
        let (arch, parts, cfg) = setup();
        let bad = [
            AttackerPlacement::LocalPassive { observer: 3 },
            AttackerPlacement::GlobalActive { gamma: 0.1, targets: vec![], isolate: false, victim: 0 },
            AttackerPlacement::GlobalActive { gamma: 0.0, targets: parts[0].clone(), isolate: false, victim: 0 },
            AttackerPlacement::GlobalActive { gamma: 0.1, targets: parts[0].clone(), isolate: false, victim: 5 },
        ];
        for p in &bad {
            assert!(matches!(fl_run(&arch, &parts, &cfg, p), Err(MiaError::Config(_))), "{p:?}");
        }
        assert!(fl_run(&arch, &parts[..2], &cfg, &AttackerPlacement::None).is_err());
    }

    #[test]
    fn active_attack_records_interventions_only_in_window() {
        let (arch, parts, cfg) = setup();
        let placement = AttackerPlacement::GlobalActive { gamma: 0.1, targets: parts[0][..4].to_vec(), isolate: false, victim: 0 };
        let log = fl_run(&arch, &parts, &cfg, &placement).unwrap();
        for rec in log.rounds() {
            let in_window = (4..=6).contains(&rec.round);
            assert_eq!(!rec.interventions.is_empty(), in_window, "round {}", rec.round);
            if in_window {
                assert_ne!(rec.distributed[0], rec.distributed[1]);
            } else {
                assert_eq!(rec.distributed[0], rec.distributed[1]);
            }
        }
    }

    #[test]
    fn round_log_persists_exactly() {
        let (arch, parts, cfg) = setup();
        let placement = AttackerPlacement::GlobalActive { gamma: 0.1, targets: parts[1][..3].to_vec(), isolate: true, victim: 1 };
        let log = fl_run(&arch, &parts, &cfg, &placement).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_round_log(dir.path(), &log).unwrap();
        assert_eq!(read_round_log(dir.path()).unwrap(), log);
    }
}
