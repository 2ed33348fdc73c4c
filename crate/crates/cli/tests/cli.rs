use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mialab::experiment::{parse_csv, ExperimentSpec, CSV_HEADER};

const SMALL: &str = r#"
scenario = "{scenario}"
seeds = [1, 2]
[dataset]
num_classes = 3
dim = 4
per_class = 12
separation = {separation}
finetune_per_class = 6
[arch]
hidden = [8, 8]
[training]
epochs = 10
batch_size = 8
lr = {lr}
[finetune]
epochs = 3
batch_size = 8
lr = 0.05
[fl]
participants = 3
rounds = 10
local_epochs = 1
batch_size = 8
lr = 0.05
[attack]
epochs = 3
batch_size = 8
lr = 0.05
train_fraction = 0.5
[attack_net]
submodule_hidden = [8]
encoder_hidden = [8]
"#;

fn config(dir: &Path, scenario: &str) -> PathBuf {
    config_with(dir, scenario, 1.0, 0.05)
}

fn config_with(dir: &Path, scenario: &str, separation: f64, lr: f64) -> PathBuf {
    let text = SMALL
        .replace("{scenario}", scenario)
        .replace("{separation}", &format!("{separation:?}"))
        .replace("{lr}", &format!("{lr:?}"));
    let path = dir.join(format!("{scenario}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn mialab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mialab")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = mialab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metrics(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn centralized_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "fine-tune");
    let out = tmp.path().join("run");
    let common = ["--config", s(&cfg), "--seed", "7", "--out-dir", s(&out)];
    run_ok(&[&["gen-data"][..], &common].concat());
    assert!(out.join("data").is_dir());
    let data = out.join("data");
    run_ok(&[&["train-target"][..], &common, &["--data", s(&data)]].concat());
    let model = out.join("target/model.json");
    assert!(model.is_file());
    assert!(out.join("target/finetuned.json").is_file());

    run_ok(&[&["attack"][..], &common, &["--model", s(&model), "--data", s(&data)]].concat());
    let m = metrics(&out.join("attack/metrics.json"));
    assert_eq!(m["mode"], "supervised");
    let auc = m["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(out.join("attack/features.csv").is_file());

    run_ok(&[&["attack"][..], &common, &["--model", s(&model), "--negatives", "finetune", "--unsupervised"]].concat());
    assert_eq!(metrics(&out.join("attack/metrics.json"))["mode"], "unsupervised");
}

#[test]
fn stages_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "fine-tune");
    let read = |dir: &str| {
        let out = tmp.path().join(dir);
        run_ok(&["train-target", "--config", s(&cfg), "--seed", "3", "--out-dir", s(&out)]);
        fs::read_to_string(out.join("target/model.json")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn federated_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "fl-stages");
    let out = tmp.path().join("fl");
    let common = ["--config", s(&cfg), "--out-dir", s(&out)];
    run_ok(&[&["gen-data"][..], &common].concat());
    let data = out.join("data");
    assert!(data.join("participant_2.csv").is_file());
    assert!(data.join("nonmembers.csv").is_file());
    run_ok(&[&["fl-run"][..], &common, &["--placement", "global-active", "--data", s(&data)]].concat());
    assert!(out.join("fl_summary.json").is_file());
    let log = out.join("rounds");
    run_ok(&[&["attack"][..], &common, &["--round-log", s(&log), "--rounds", "8,10", "--data", s(&data)]].concat());
    let auc = metrics(&out.join("attack/metrics.json"))["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn experiment_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "outputs-vs-gradients");
    let out = tmp.path().join("exp");
    run_ok(&["experiment", "--config", s(&cfg), "--out-dir", s(&out)]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(parse_csv(&csv).unwrap().len(), 2 * 3);

    let filtered = tmp.path().join("filtered");
    run_ok(&["report", "--input", s(&out.join("report.json")), "--seed", "2", "--out-dir", s(&filtered)]);
    let rows = parse_csv(&fs::read_to_string(filtered.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.seed == 2));
    let all = parse_csv(&csv).unwrap();
    assert_eq!(rows, all.into_iter().filter(|r| r.seed == 2).collect::<Vec<_>>());

    let single = tmp.path().join("single");
    run_ok(&["experiment", "--config", s(&cfg), "--seed", "2", "--out-dir", s(&single)]);
    assert_eq!(fs::read_to_string(single.join("report.csv")).unwrap(), fs::read_to_string(filtered.join("report.csv")).unwrap());
}

#[test]
fn config_problems_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.toml");
    assert_eq!(mialab(&["experiment", "--config", s(&missing), "--out-dir", s(tmp.path())]).status.code(), Some(1));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "scenario = \"layer-depth\"\nseeds = [1]\n").unwrap();
    assert_eq!(mialab(&["gen-data", "--config", s(&bad), "--out-dir", s(tmp.path())]).status.code(), Some(1));

    let cfg = config(tmp.path(), "layer-depth");
    assert_eq!(mialab(&["experiment", "--config", s(&cfg), "--bogus"]).status.code(), Some(1));
    let no_fl = tmp.path().join("no_fl.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    let (head, tail) = text.split_once("[fl]").unwrap();
    fs::write(&no_fl, format!("{head}{}", &tail[tail.find("[attack]").unwrap()..])).unwrap();
    assert_eq!(mialab(&["fl-run", "--config", s(&no_fl), "--out-dir", s(tmp.path())]).status.code(), Some(1));
    assert_eq!(mialab(&[]).status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two_and_keeps_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), "outputs-vs-gradients", 1e150, 1e150);
    let out = tmp.path().join("diverged");
    let res = mialab(&["experiment", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), format!("{CSV_HEADER}\n"));
    let res = mialab(&["train-target", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn help_exits_with_zero() {
    let out = run_ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train-target", "fl-run", "attack", "experiment", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
        let help = run_ok(&[sub, "--help"]);
        let text = String::from_utf8_lossy(&help.stdout);
        assert!(text.contains("--seed") && text.contains("--out-dir"), "{sub}");
    }
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentSpec::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert_eq!(seen, 6);
}
