use std::fs;
use std::path::{Path, PathBuf};

use mialab::attack::AttackNetSpec;
use mialab::data::{read_samples_csv, read_split, write_samples_csv, write_split, FederatedSplit, Sample};
use mialab::experiment::{
    attack_config, cluster_seed, dataset, default_features, evaluate_supervised, evaluate_unsupervised,
    federated_config, federated_dataset, finetune_training, run_experiment_partial, target_training, Candidates,
    ExperimentReport, ExperimentSpec,
};
use mialab::features::{extract, feature_vector, write_feature_matrix};
use mialab::fedsim::{self, observe_participant, read_round_log, write_round_log, AttackerPlacement};
use mialab::metrics::{ClassificationMetrics, RocCurve};
use mialab::training::{accuracy, fine_tune, mean_loss, train_centralized};
use mialab::{MiaError, ModelSnapshot, Result};
use serde_json::json;

use crate::{Common, Negatives, PlacementArg};

pub struct AttackArgs {
    pub models: Vec<PathBuf>,
    pub round_log: Option<PathBuf>,
    pub rounds: Vec<usize>,
    pub participant: Option<usize>,
    pub data: Option<PathBuf>,
    pub negatives: Negatives,
    pub unsupervised: bool,
}

fn load(common: &Common) -> Result<(ExperimentSpec, u64)> {
    let spec = ExperimentSpec::load(&common.config)?;
    let seed = common.seed.or_else(|| spec.seeds.first().copied()).unwrap_or(0);
    Ok((spec, seed))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_federated(dir: &Path, data: &FederatedSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, p) in data.participants.iter().enumerate() {
        write_samples_csv(&dir.join(format!("participant_{i}.csv")), p)?;
    }
    write_samples_csv(&dir.join("nonmembers.csv"), &data.nonmembers)?;
    let meta = json!({ "num_classes": data.num_classes, "dim": data.dim, "participants": data.participants.len() });
    write_json(&dir.join("dataset.json"), &meta)
}

fn read_federated(dir: &Path, spec: &ExperimentSpec) -> Result<FederatedSplit> {
    let n = spec.fl.as_ref().ok_or_else(|| MiaError::Config("missing [fl] section".into()))?.participants;
    let participants = (0..n)
        .map(|i| read_samples_csv(&dir.join(format!("participant_{i}.csv"))))
        .collect::<Result<Vec<_>>>()?;
    let split = FederatedSplit {
        participants,
        nonmembers: read_samples_csv(&dir.join("nonmembers.csv"))?,
        num_classes: spec.dataset.num_classes,
        dim: spec.dataset.dim,
    };
    let all = split.participants.iter().flatten().chain(&split.nonmembers);
    if let Some(bad) = all.clone().find(|s| s.x.len() != split.dim || s.y >= split.num_classes) {
        return Err(MiaError::Input(format!("sample with {} features and label {} does not fit the config", bad.x.len(), bad.y)));
    }
    Ok(split)
}

pub fn gen_data(common: &Common) -> Result<()> {
    let (spec, seed) = load(common)?;
    let dir = common.out_dir.join("data");
    if spec.scenario.is_federated() {
        let data = federated_dataset(&spec, seed)?;
        write_federated(&dir, &data)?;
        println!("wrote {} participant sets and a nonmember pool to {}", data.participants.len(), dir.display());
    } else {
        let split = dataset(&spec, seed)?;
        write_split(&dir, &split)?;
        println!(
            "wrote {} members, {} nonmembers, {} fine-tuning samples to {}",
            split.members.len(),
            split.nonmembers.len(),
            split.finetune.len(),
            dir.display()
        );
    }
    Ok(())
}

pub fn train_target(common: &Common, data: Option<&Path>) -> Result<()> {
    let (spec, seed) = load(common)?;
    let split = match data {
        Some(dir) => read_split(dir)?,
        None => dataset(&spec, seed)?,
    };
    let arch = spec.architecture()?;
    let out = train_centralized(&arch, &split.members, &target_training(&spec, seed)?)?;
    let dir = common.out_dir.join("target");
    fs::create_dir_all(&dir)?;
    out.model.save(&dir.join("model.json"))?;
    for snap in out.series.snapshots() {
        snap.save(&dir.join(format!("snapshot_{}.json", snap.tag())))?;
    }
    let mut summary = json!({
        "seed": seed,
        "train_accuracy": out.train_accuracy,
        "test_accuracy": accuracy(&out.model, &split.nonmembers)?,
        "member_loss": mean_loss(&out.model, &split.members)?,
        "nonmember_loss": mean_loss(&out.model, &split.nonmembers)?,
    });
    if spec.finetune.is_some() && !split.finetune.is_empty() {
        let tuned = fine_tune(&out.model, &split.finetune, &finetune_training(&spec, seed)?)?;
        tuned.save(&dir.join("finetuned.json"))?;
        summary["finetune_loss_before"] = json!(mean_loss(&out.model, &split.finetune)?);
        summary["finetune_loss_after"] = json!(mean_loss(&tuned, &split.finetune)?);
    }
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "target trained: train accuracy {:.3}, test accuracy {:.3}; saved to {}",
        out.train_accuracy,
        summary["test_accuracy"].as_f64().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

pub fn fl_run(common: &Common, placement: PlacementArg, data: Option<&Path>) -> Result<()> {
    let (spec, seed) = load(common)?;
    let fl = spec.fl.clone().ok_or_else(|| MiaError::Config("fl-run needs an [fl] section".into()))?;
    let fed = match data {
        Some(dir) => read_federated(dir, &spec)?,
        None => federated_dataset(&spec, seed)?,
    };
    let cands = Candidates::draw(&fed.participants[fl.victim], &fed.nonmembers, seed)?;
    let active = |isolate| AttackerPlacement::GlobalActive {
        gamma: fl.gamma(),
        targets: cands.all(),
        isolate,
        victim: fl.victim,
    };
    let placement = match placement {
        PlacementArg::None => AttackerPlacement::None,
        PlacementArg::GlobalPassive => AttackerPlacement::GlobalPassive,
        PlacementArg::GlobalActive => active(false),
        PlacementArg::GlobalActiveIsolate => active(true),
        PlacementArg::LocalPassive => AttackerPlacement::LocalPassive { observer: fl.observer() },
    };
    let cfg = federated_config(&spec, seed, fl.window())?;
    let log = fedsim::fl_run(&spec.architecture()?, &fed.participants, &cfg, &placement)?;
    let dir = common.out_dir.join("rounds");
    write_round_log(&dir, &log)?;
    let test = accuracy(log.final_global(), &fed.nonmembers)?;
    write_json(
        &common.out_dir.join("fl_summary.json"),
        &json!({ "seed": seed, "placement": placement.name(), "rounds": fl.rounds, "global_test_accuracy": test }),
    )?;
    println!("{} rounds ({}), global test accuracy {test:.3}; log in {}", fl.rounds, placement.name(), dir.display());
    Ok(())
}

fn metrics_json(mode: &str, m: &ClassificationMetrics, roc: &RocCurve) -> serde_json::Value {
    json!({
        "mode": mode,
        "accuracy": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "precision_undefined": m.precision_undefined,
        "recall_undefined": m.recall_undefined,
        "auc": roc.auc,
        "roc": roc.points,
    })
}

/// Members and negatives of the attacked population.
fn population(spec: &ExperimentSpec, seed: u64, args: &AttackArgs, participant: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let federated = args.round_log.is_some();
    let pick = |members: Vec<Sample>, nonmembers: Vec<Sample>, finetune: Vec<Sample>| match args.negatives {
        Negatives::Nonmembers => Ok((members, nonmembers)),
        Negatives::Finetune if !finetune.is_empty() => Ok((members, finetune)),
        Negatives::Finetune => Err(MiaError::Config("no fine-tuning set available".into())),
    };
    match (&args.data, federated) {
        (Some(dir), false) => {
            let s = read_split(dir)?;
            pick(s.members, s.nonmembers, s.finetune)
        }
        (Some(dir), true) => {
            let mut f = read_federated(dir, spec)?;
            pick(f.participants.swap_remove(participant), f.nonmembers, vec![])
        }
        (None, false) => {
            let s = dataset(spec, seed)?;
            pick(s.members, s.nonmembers, s.finetune)
        }
        (None, true) => {
            let mut f = federated_dataset(spec, seed)?;
            pick(f.participants.swap_remove(participant), f.nonmembers, vec![])
        }
    }
}

pub fn attack(common: &Common, args: &AttackArgs) -> Result<()> {
    let (spec, seed) = load(common)?;
    let victim = spec.fl.as_ref().map_or(0, |f| f.victim);
    let participant = args.participant.unwrap_or(victim);
    let snapshots: Vec<ModelSnapshot> = match &args.round_log {
        Some(dir) => {
            let log = read_round_log(dir)?;
            let rounds = if args.rounds.is_empty() {
                spec.fl.as_ref().map(|f| f.window()).unwrap_or_default()
            } else {
                args.rounds.clone()
            };
            observe_participant(&log, &AttackerPlacement::GlobalPassive, &rounds, participant)?
        }
        None => args.models.iter().map(|p| ModelSnapshot::load(p)).collect::<Result<_>>()?,
    };
    if snapshots.is_empty() {
        return Err(MiaError::Config("nothing to attack: pass --model or --round-log with rounds".into()));
    }
    let (members, negatives) = population(&spec, seed, args, participant)?;
    let cands = Candidates::draw(&members, &negatives, seed)?;
    let dir = common.out_dir.join("attack");
    fs::create_dir_all(&dir)?;

    let (mode, metrics, roc) = if args.unsupervised {
        let [model] = snapshots.as_slice() else {
            return Err(MiaError::Config("the clustering attack observes exactly one snapshot".into()));
        };
        let (m, roc) = evaluate_unsupervised(model, &cands, cluster_seed(seed))?;
        ("unsupervised", m, roc)
    } else {
        let features = default_features(&spec, snapshots[0].arch());
        let net: &AttackNetSpec = &spec.attack_net;
        let run = evaluate_supervised(&snapshots, &cands, &features, net, &attack_config(&spec, seed))?;
        run.model.save(&dir.join("model"))?;
        let all = cands.all();
        let mut rows = Vec::with_capacity(all.len());
        let mut geometry = None;
        for (s, member) in all.iter().zip(cands.truth()) {
            let (v, g) = feature_vector(&extract(&snapshots, &s.x, s.y, &features)?);
            geometry.get_or_insert(g);
            rows.push((v, Some(member)));
        }
        write_feature_matrix(&dir.join("features.csv"), &rows, &geometry.expect("at least two candidates"))?;
        ("supervised", run.metrics, run.roc)
    };
    write_json(&dir.join("metrics.json"), &metrics_json(mode, &metrics, &roc))?;
    println!(
        "{mode} attack: accuracy {:.3}, precision {:.3}, recall {:.3}, AUC {:.3}; results in {}",
        metrics.accuracy,
        metrics.precision,
        metrics.recall,
        roc.auc,
        dir.display()
    );
    Ok(())
}

fn print_aggregates(report: &ExperimentReport) {
    println!("{:<24} {:>5} {:>9} {:>17} {:>9}", "condition", "seeds", "accuracy", "range", "auc");
    for a in &report.aggregates {
        println!(
            "{:<24} {:>5} {:>9.3} {:>17} {:>9.3}",
            a.condition,
            a.seeds,
            a.accuracy.median,
            format!("[{:.3}, {:.3}]", a.accuracy.min, a.accuracy.max),
            a.auc.median
        );
    }
}

pub fn experiment(common: &Common) -> Result<()> {
    let mut spec = ExperimentSpec::load(&common.config)?;
    if let Some(seed) = common.seed {
        spec.seeds = vec![seed];
    }
    let (report, failure) = run_experiment_partial(&spec);
    let (csv, json) = report.emit(&common.out_dir)?;
    print_aggregates(&report);
    println!("{} in {:.1}s; wrote {} and {}", spec.scenario.name(), report.wall_clock_secs, csv.display(), json.display());
    failure.map_or(Ok(()), Err)
}

pub fn report(input: &Path, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let mut report = ExperimentReport::load(input)?;
    if let Some(seed) = seed {
        report = report.only_seed(seed);
    }
    let (csv, _) = report.emit(out_dir)?;
    print_aggregates(&report);
    println!("wrote {}", csv.display());
    Ok(())
}
