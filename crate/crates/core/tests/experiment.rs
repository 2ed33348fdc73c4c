use mialab::experiment::{conditions, parse_csv, run_experiment, run_experiment_partial, ExperimentSpec, Scenario};
use mialab::MiaError;

/// Desk-sized spec: every scenario finishes in well under a second.
fn small(scenario: Scenario, seeds: &[u64]) -> ExperimentSpec {
    let text = format!(
        r#"
        scenario = "{}"
        seeds = {seeds:?}
        [dataset]
        num_classes = 3
        dim = 4
        per_class = 12
        separation = 1.0
        finetune_per_class = 6
        [arch]
        hidden = [8, 8]
        [training]
        epochs = 20
        batch_size = 8
        lr = 0.05
        [finetune]
        epochs = 5
        batch_size = 8
        lr = 0.05
        [fl]
        participants = 4
        rounds = 10
        local_epochs = 1
        batch_size = 8
        lr = 0.05
        [attack]
        epochs = 4
        batch_size = 8
        lr = 0.05
        train_fraction = 0.5
        [attack_net]
        submodule_hidden = [8]
        encoder_hidden = [8]
        "#,
        scenario.name()
    );
    ExperimentSpec::from_toml(&text).unwrap()
}

#[test]
fn every_scenario_reports_valid_metrics() {
    for scenario in Scenario::ALL {
        let spec = small(scenario, &[3]);
        let report = run_experiment(&spec).unwrap();
        let names = conditions(&spec).unwrap();
        assert_eq!(report.results.len(), names.len(), "{scenario:?}");
        for (r, name) in report.results.iter().zip(&names) {
            assert_eq!(&r.condition, name);
            let m = &r.metrics;
            for v in [m.accuracy, m.precision, m.recall, r.auc] {
                assert!((0.0..=1.0).contains(&v), "{scenario:?} {name}: {v}");
            }
            assert_eq!(r.roc.first(), Some(&(0.0, 0.0)));
            assert_eq!(r.roc.last(), Some(&(1.0, 1.0)));
            assert!(r.roc.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        }
        assert_eq!(report.aggregates.len(), names.len());
    }
}

#[test]
fn placement_and_finetune_conditions() {
    let names = conditions(&small(Scenario::FlPlacement, &[1])).unwrap();
    assert_eq!(names, ["global-passive", "global-active", "global-active-isolate", "local-passive"]);
    let names = conditions(&small(Scenario::FineTune, &[1])).unwrap();
    assert_eq!(names, ["members-vs-nonmembers", "members-vs-finetune"]);
    let names = conditions(&small(Scenario::LayerDepth, &[1])).unwrap();
    assert_eq!(names, ["final-2", "final-1", "final"]);
}

#[test]
fn csv_has_one_row_per_seed_and_condition() {
    let spec = small(Scenario::OutputsVsGradients, &[8, 2]);
    let report = run_experiment(&spec).unwrap();
    let rows = parse_csv(&report.to_csv()).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    let seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [2, 2, 2, 8, 8, 8]);
}

#[test]
fn reruns_are_identical() {
    let spec = small(Scenario::FlStages, &[4]);
    let a = run_experiment(&spec).unwrap();
    let b = run_experiment(&spec).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.results, b.results);
    assert_eq!(a.aggregates, b.aggregates);
}

#[test]
fn seed_parallelism_does_not_change_results() {
    let mut spec = small(Scenario::UnsupervisedCentralized, &[1, 2, 3]);
    let serial = run_experiment(&spec).unwrap();
    spec.parallel_seeds = true;
    assert_eq!(run_experiment(&spec).unwrap().to_csv(), serial.to_csv());
}

#[test]
fn scenario_order_is_irrelevant() {
    let a = small(Scenario::LayerDepth, &[5]);
    let b = small(Scenario::FineTune, &[5]);
    let first = (run_experiment(&a).unwrap().to_csv(), run_experiment(&b).unwrap().to_csv());
    let b_first = run_experiment(&b).unwrap().to_csv();
    assert_eq!((run_experiment(&a).unwrap().to_csv(), b_first), first);
}

#[test]
fn missing_sections_are_config_errors() {
    let mut spec = small(Scenario::FlPlacement, &[1]);
    spec.fl = None;
    assert!(matches!(spec.validate(), Err(MiaError::Config(_))));
    let mut spec = small(Scenario::FineTune, &[1]);
    spec.finetune = None;
    assert!(matches!(spec.validate(), Err(MiaError::Config(_))));
    let mut spec = small(Scenario::LayerDepth, &[1]);
    spec.seeds = vec![1, 1];
    assert!(spec.validate().is_err());
    spec.seeds = vec![1];
    spec.training = None;
    assert!(spec.validate().is_err());
    assert!(matches!(ExperimentSpec::from_toml("scenario = \"nope\""), Err(MiaError::Config(_))));
}

#[test]
fn config_round_trips_through_toml() {
    let spec = small(Scenario::FlStages, &[1, 2]);
    assert_eq!(ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap(), spec);
}

#[test]
fn failures_still_yield_a_report() {
    let mut spec = small(Scenario::OutputsVsGradients, &[1, 2]);
    spec.dataset.separation = 1e150;
    spec.training.as_mut().unwrap().lr = 1e150;
    let (report, err) = run_experiment_partial(&spec);
    assert!(matches!(err, Some(MiaError::Numeric(_))), "{err:?}");
    assert_eq!(report.to_csv().lines().count(), 1);
    assert!(run_experiment(&spec).is_err());
}

#[test]
fn empty_seed_list_gives_header_only_csv() {
    let report = run_experiment(&small(Scenario::FineTune, &[])).unwrap();
    assert_eq!(report.to_csv(), "scenario,condition,seed,accuracy,precision,recall,auc\n");
}
