//! Scenario runner: builds targets, extracts features, mounts attacks and
//! collects metrics for every seed and condition of one experiment.

mod report;
mod spec;

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{parse_csv, Aggregate, CsvRow, ExperimentReport, Summary, CSV_HEADER};
pub use spec::{stage_rounds, ArchSpec, ExperimentSpec, FlSpec, Scenario};

use crate::attack::{
    attack_unsupervised, predict_batch, train_supervised_attack, AttackModel, AttackNetSpec, AttackTrainConfig,
};
use crate::data::{choose, make_federated_dataset, make_synthetic_dataset, DatasetSplit, FederatedSplit, Sample};
use crate::error::{MiaError, Result};
use crate::features::{extract, FeatureConfig, GradientMode};
use crate::fedsim::{fl_run, observe_participant, AttackerPlacement, FlConfig};
use crate::metrics::{classification_metrics, roc_auc, ClassificationMetrics, RocCurve};
use crate::nn::{Architecture, ModelSnapshot};
use crate::rng::{self, label};
use crate::training::{fine_tune, train_centralized, TrainingConfig};

/// Outcome of one attack for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub seed: u64,
    pub metrics: ClassificationMetrics,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
}

/// Condition labels a scenario reports, in report order.
pub fn conditions(spec: &ExperimentSpec) -> Result<Vec<String>> {
    let names: Vec<String> = match spec.scenario {
        Scenario::LayerDepth => {
            let depth = layer_depth_layers(&spec.architecture()?).len();
            (0..depth).rev().map(depth_name).collect()
        }
        Scenario::OutputsVsGradients => vec!["default".into(), "outputs".into(), "gradients".into()],
        Scenario::FineTune => vec!["members-vs-nonmembers".into(), "members-vs-finetune".into()],
        Scenario::FlStages => ["early", "mid", "late", "latest"].map(String::from).to_vec(),
        Scenario::FlPlacement => placements_for_names().map(String::from).to_vec(),
        Scenario::UnsupervisedCentralized => vec!["trained".into(), "untrained".into()],
    };
    Ok(names)
}

fn depth_name(from_top: usize) -> String {
    match from_top {
        0 => "final".into(),
        k => format!("final-{k}"),
    }
}

fn placements_for_names() -> [&'static str; 4] {
    ["global-passive", "global-active", "global-active-isolate", "local-passive"]
}

/// The last three activation layers, bottom first.
fn layer_depth_layers(arch: &Architecture) -> Vec<usize> {
    let act = arch.activation_layers();
    act[act.len().saturating_sub(3)..].to_vec()
}

/// Runs every seed, stopping at nothing: seeds that fail are left out of the
/// report and the error of the lowest failing seed is returned alongside.
pub fn run_experiment_partial(spec: &ExperimentSpec) -> (ExperimentReport, Option<MiaError>) {
    let start = Instant::now();
    if let Err(e) = spec.validate() {
        return (ExperimentReport::new(spec.clone(), Vec::new(), 0.0), Some(e));
    }
    let mut seeds = spec.seeds.clone();
    seeds.sort_unstable();
    let outcomes: Vec<Result<Vec<ConditionResult>>> = if spec.parallel_seeds {
        seeds.par_iter().map(|&s| run_seed(spec, s)).collect()
    } else {
        seeds.iter().map(|&s| run_seed(spec, s)).collect()
    };
    let mut results = Vec::new();
    let mut failure = None;
    for outcome in outcomes {
        match outcome {
            Ok(rows) => results.extend(rows),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    let report = ExperimentReport::new(spec.clone(), results, start.elapsed().as_secs_f64());
    (report, failure)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    match run_experiment_partial(spec) {
        (report, None) => Ok(report),
        (_, Some(e)) => Err(e),
    }
}

fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<Vec<ConditionResult>> {
    let names = conditions(spec)?;
    let outcomes = match spec.scenario {
        Scenario::LayerDepth => layer_depth(spec, seed)?,
        Scenario::OutputsVsGradients => outputs_vs_gradients(spec, seed)?,
        Scenario::FineTune => fine_tune_tasks(spec, seed)?,
        Scenario::FlStages => fl_stages(spec, seed)?,
        Scenario::FlPlacement => fl_placement(spec, seed)?,
        Scenario::UnsupervisedCentralized => unsupervised(spec, seed)?,
    };
    Ok(names
        .into_iter()
        .zip(outcomes)
        .map(|(condition, (metrics, roc))| ConditionResult {
            condition,
            seed,
            metrics,
            auc: roc.auc,
            roc: roc.points,
        })
        .collect())
}

type Outcome = (ClassificationMetrics, RocCurve);

/// Class-balanced attack candidates: equally many members and nonmembers,
/// drawn in a seed-determined order.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub members: Vec<Sample>,
    pub nonmembers: Vec<Sample>,
}

impl Candidates {
    pub fn draw(members: &[Sample], nonmembers: &[Sample], seed: u64) -> Result<Self> {
        let n = members.len().min(nonmembers.len());
        if n < 2 {
            return Err(MiaError::input("attack needs at least two members and two nonmembers"));
        }
        let mut rng = rng::stream(seed, &[label::SPLIT]);
        Ok(Self { members: choose(members, n, &mut rng), nonmembers: choose(nonmembers, n, &mut rng) })
    }

    /// Members first, then nonmembers.
    pub fn all(&self) -> Vec<Sample> {
        self.members.iter().chain(&self.nonmembers).cloned().collect()
    }

    pub fn truth(&self) -> Vec<bool> {
        (0..2 * self.members.len()).map(|i| i < self.members.len()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedRun {
    pub model: AttackModel,
    pub metrics: ClassificationMetrics,
    pub roc: RocCurve,
}

/// Trains the attack on the first `train_fraction` of each candidate class
/// and scores it on the rest.
pub fn evaluate_supervised(
    snapshots: &[ModelSnapshot],
    cands: &Candidates,
    features: &FeatureConfig,
    net: &AttackNetSpec,
    attack: &AttackTrainConfig,
) -> Result<SupervisedRun> {
    let n = cands.members.len();
    let known = ((n as f64 * attack.train_fraction).round() as usize).clamp(1, n - 1);
    let mut train = Vec::with_capacity(2 * known);
    let mut eval = Vec::with_capacity(2 * (n - known));
    let mut truth = Vec::with_capacity(2 * (n - known));
    for (set, member) in [(&cands.members, true), (&cands.nonmembers, false)] {
        for (i, s) in set.iter().enumerate() {
            let f = extract(snapshots, &s.x, s.y, features)?;
            if i < known {
                train.push((f, member));
            } else {
                eval.push(f);
                truth.push(member);
            }
        }
    }
    let model = train_supervised_attack(&train, net, attack)?;
    let preds = predict_batch(&model, &eval)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let decided: Vec<bool> = preds.iter().map(|p| p.member).collect();
    Ok(SupervisedRun { metrics: classification_metrics(&decided, &truth)?, roc: roc_auc(&scores, &truth)?, model })
}

/// Clusters the per-layer gradient norms of every candidate under `model`.
/// The ROC degenerates to the single operating point of the decision.
pub fn evaluate_unsupervised(model: &ModelSnapshot, cands: &Candidates, seed: u64) -> Result<Outcome> {
    let cfg = FeatureConfig::gradient_norms_for(model.arch());
    let features = cands
        .all()
        .iter()
        .map(|s| extract(std::slice::from_ref(model), &s.x, s.y, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let truth = cands.truth();
    let out = attack_unsupervised(&features, seed)?;
    let scores: Vec<f64> = out.members.iter().map(|&m| f64::from(u8::from(m))).collect();
    Ok((classification_metrics(&out.members, &truth)?, roc_auc(&scores, &truth)?))
}

fn supervised(
    spec: &ExperimentSpec,
    snapshots: &[ModelSnapshot],
    cands: &Candidates,
    features: &FeatureConfig,
    seed: u64,
) -> Result<Outcome> {
    let run = evaluate_supervised(snapshots, cands, features, &spec.attack_net, &attack_config(spec, seed))?;
    Ok((run.metrics, run.roc))
}

// Per-seed derivations. The CLI pipeline goes through these too, so its
// step-by-step products match what an experiment computes for that seed.

pub fn dataset(spec: &ExperimentSpec, seed: u64) -> Result<DatasetSplit> {
    make_synthetic_dataset(&spec.dataset, rng::derive_seed(seed, &[label::DATA]))
}

pub fn federated_dataset(spec: &ExperimentSpec, seed: u64) -> Result<FederatedSplit> {
    let fl = spec.fl.as_ref().ok_or_else(|| MiaError::config("missing [fl] section"))?;
    make_federated_dataset(&spec.dataset, fl.participants, rng::derive_seed(seed, &[label::DATA]))
}

pub fn target_training(spec: &ExperimentSpec, seed: u64) -> Result<TrainingConfig> {
    let mut cfg = spec.training.clone().ok_or_else(|| MiaError::config("missing [training] section"))?;
    cfg.seed = rng::derive_seed(seed, &[label::TARGET, cfg.seed]);
    Ok(cfg)
}

pub fn finetune_training(spec: &ExperimentSpec, seed: u64) -> Result<TrainingConfig> {
    let mut cfg = spec.finetune.clone().ok_or_else(|| MiaError::config("missing [finetune] section"))?;
    cfg.seed = rng::derive_seed(seed, &[label::TARGET, label::SHUFFLE, cfg.seed]);
    cfg.snapshot_epochs.clear();
    Ok(cfg)
}

pub fn federated_config(spec: &ExperimentSpec, seed: u64, observation_rounds: Vec<usize>) -> Result<FlConfig> {
    let fl = spec.fl.as_ref().ok_or_else(|| MiaError::config("missing [fl] section"))?;
    Ok(FlConfig {
        num_participants: fl.participants,
        rounds: fl.rounds,
        local_epochs: fl.local_epochs,
        batch_size: fl.batch_size,
        lr: fl.lr,
        observation_rounds,
        seed: rng::derive_seed(seed, &[label::FEDERATED]),
        participant_seeds: None,
        parallel: fl.parallel,
    })
}

pub fn attack_config(spec: &ExperimentSpec, seed: u64) -> AttackTrainConfig {
    let mut cfg = spec.attack.clone();
    cfg.seed = rng::derive_seed(seed, &[label::ATTACK, cfg.seed]);
    cfg
}

pub fn cluster_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[label::CLUSTER])
}

/// The `[features]` section, or the default selection for `arch`.
pub fn default_features(spec: &ExperimentSpec, arch: &Architecture) -> FeatureConfig {
    spec.features.clone().unwrap_or_else(|| FeatureConfig::default_for(arch))
}

fn centralized_target(spec: &ExperimentSpec, seed: u64) -> Result<(DatasetSplit, ModelSnapshot)> {
    let split = dataset(spec, seed)?;
    let mut cfg = target_training(spec, seed)?;
    cfg.snapshot_epochs.clear();
    let model = train_centralized(&spec.architecture()?, &split.members, &cfg)?.model;
    Ok((split, model))
}

fn only_layer(layer: usize) -> FeatureConfig {
    FeatureConfig {
        observed_layers: BTreeSet::from([layer]),
        gradient_layers: BTreeSet::new(),
        gradient_mode: GradientMode::Full,
        include_output_probs: false,
        include_loss: false,
        include_label: true,
    }
}

fn layer_depth(spec: &ExperimentSpec, seed: u64) -> Result<Vec<Outcome>> {
    let (split, model) = centralized_target(spec, seed)?;
    let cands = Candidates::draw(&split.members, &split.nonmembers, seed)?;
    layer_depth_layers(model.arch())
        .into_iter()
        .map(|layer| supervised(spec, std::slice::from_ref(&model), &cands, &only_layer(layer), seed))
        .collect()
}

fn outputs_vs_gradients(spec: &ExperimentSpec, seed: u64) -> Result<Vec<Outcome>> {
    let (split, model) = centralized_target(spec, seed)?;
    let arch = model.arch().clone();
    let cands = Candidates::draw(&split.members, &split.nonmembers, seed)?;
    let outputs = FeatureConfig {
        observed_layers: BTreeSet::new(),
        gradient_layers: BTreeSet::new(),
        gradient_mode: GradientMode::Full,
        include_output_probs: true,
        include_loss: false,
        include_label: true,
    };
    let gradients = FeatureConfig {
        gradient_layers: arch.dense_layers().last().copied().into_iter().collect(),
        include_output_probs: false,
        ..outputs.clone()
    };
    [default_features(spec, &arch), outputs, gradients]
        .iter()
        .map(|f| supervised(spec, std::slice::from_ref(&model), &cands, f, seed))
        .collect()
}

fn fine_tune_tasks(spec: &ExperimentSpec, seed: u64) -> Result<Vec<Outcome>> {
    let (split, base) = centralized_target(spec, seed)?;
    let tuned = fine_tune(&base, &split.finetune, &finetune_training(spec, seed)?)?;
    let pair = [base, tuned];
    let features = default_features(spec, pair[0].arch());
    let fresh = Candidates::draw(&split.members, &split.nonmembers, seed)?;
    let finetune = Candidates::draw(&split.members, &split.finetune, seed)?;
    Ok(vec![
        supervised(spec, &pair, &fresh, &features, seed)?,
        supervised(spec, &pair, &finetune, &features, seed)?,
    ])
}

fn fl_stages(spec: &ExperimentSpec, seed: u64) -> Result<Vec<Outcome>> {
    let fl = spec.fl.as_ref().expect("validated");
    let arch = spec.architecture()?;
    let data = federated_dataset(spec, seed)?;
    let cands = Candidates::draw(&data.participants[fl.victim], &data.nonmembers, seed)?;
    let sets = stage_rounds(fl.rounds)?;
    let all: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    let cfg = federated_config(spec, seed, all.into_iter().collect())?;
    let placement = AttackerPlacement::GlobalPassive;
    let log = fl_run(&arch, &data.participants, &cfg, &placement)?;
    let features = default_features(spec, &arch);
    sets.iter()
        .map(|rounds| {
            let snaps = observe_participant(&log, &placement, rounds, fl.victim)?;
            supervised(spec, &snaps, &cands, &features, seed)
        })
        .collect()
}

fn fl_placement(spec: &ExperimentSpec, seed: u64) -> Result<Vec<Outcome>> {
    let fl = spec.fl.as_ref().expect("validated");
    let arch = spec.architecture()?;
    let data = federated_dataset(spec, seed)?;
    let cands = Candidates::draw(&data.participants[fl.victim], &data.nonmembers, seed)?;
    let window = fl.window();
    let cfg = federated_config(spec, seed, window.clone())?;
    let active = |isolate| AttackerPlacement::GlobalActive {
        gamma: fl.gamma(),
        targets: cands.all(),
        isolate,
        victim: fl.victim,
    };
    let placements = [
        AttackerPlacement::GlobalPassive,
        active(false),
        active(true),
        AttackerPlacement::LocalPassive { observer: fl.observer() },
    ];
    let features = default_features(spec, &arch);
    // Passive placements do not change the run, so they share one log.
    let passive = fl_run(&arch, &data.participants, &cfg, &AttackerPlacement::GlobalPassive)?;
    placements
        .iter()
        .map(|placement| {
            let active_log;
            let log = if let AttackerPlacement::GlobalActive { .. } = placement {
                active_log = fl_run(&arch, &data.participants, &cfg, placement)?;
                &active_log
            } else {
                &passive
            };
            let snaps = observe_participant(log, placement, &window, fl.victim)?;
            supervised(spec, &snaps, &cands, &features, seed)
        })
        .collect()
}

fn unsupervised(spec: &ExperimentSpec, seed: u64) -> Result<Vec<Outcome>> {
    let (split, trained) = centralized_target(spec, seed)?;
    let untrained = ModelSnapshot::initialize(trained.arch(), target_training(spec, seed)?.seed);
    let cands = Candidates::draw(&split.members, &split.nonmembers, seed)?;
    [trained, untrained].iter().map(|model| evaluate_unsupervised(model, &cands, cluster_seed(seed))).collect()
}
