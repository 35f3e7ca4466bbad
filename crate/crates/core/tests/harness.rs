use std::fs;

use self_ensemble::harness::{
    emit_report, read_report, run_ablation_suite, run_experiment, ExperimentConfig, Variant,
};

fn small(extra: &[&str]) -> ExperimentConfig {
    let mut overrides: Vec<String> = [
        "data={kind=\"blobs\", classes=3, per_class=40, dim=4, spread=1.0, val_per_class=10, test_per_class=10}",
        "model.hidden=[8]",
        "batch.total=16",
        "batch.labeled=4",
        "early_stop.max_epochs_per_iteration=6",
        "early_stop.patience=3",
        "early_stop.total_epoch_budget=30",
        "filter.max_filter_iterations=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    let cfg = ExperimentConfig::from_toml_with_overrides("", &overrides).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn lines(path: &std::path::Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn identical_seeds_give_identical_reports() {
    let cfg = small(&[]);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.without_wall_time(), b.without_wall_time());
    assert_eq!(
        serde_json::to_string(&a.without_wall_time()).unwrap(),
        serde_json::to_string(&b.without_wall_time()).unwrap()
    );
}

#[test]
fn different_seeds_give_different_curves() {
    let a = run_experiment(&small(&[])).unwrap();
    let b = run_experiment(&small(&["seeds.init=99"])).unwrap();
    assert_ne!(a.curves, b.curves);
}

#[test]
fn one_epoch_run_emits_one_curve_row() {
    let cfg = small(&[
        "early_stop.max_epochs_per_iteration=1",
        "early_stop.patience=1",
        "filter.max_filter_iterations=0",
    ]);
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    assert_eq!(lines(&dir.path().join("curves.csv")), 2);
    assert_eq!(lines(&dir.path().join("filter.csv")), 2);
}

#[test]
fn filter_rows_follow_iterations() {
    let report = run_experiment(&small(&[])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    assert_eq!(
        lines(&dir.path().join("filter.csv")),
        report.iterations.len() + 1
    );
    assert_eq!(
        lines(&dir.path().join("curves.csv")),
        report.curves.len() + 1
    );
    let epochs: usize = report.iterations.iter().map(|i| i.epochs_run).sum();
    assert_eq!(epochs, report.curves.len());
    assert_eq!(epochs, report.epochs_used);
}

#[test]
fn emitting_twice_gives_the_same_files() {
    let report = run_experiment(&small(&[])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let first: Vec<Vec<u8>> = ["summary.json", "curves.csv", "filter.csv"]
        .iter()
        .map(|f| fs::read(dir.path().join(f)).unwrap())
        .collect();
    emit_report(&read_report(dir.path()).unwrap(), dir.path()).unwrap();
    for (f, before) in ["summary.json", "curves.csv", "filter.csv"].iter().zip(first) {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), before, "{f}");
    }
    assert_eq!(read_report(dir.path()).unwrap(), report);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let plain = run_experiment(&small(&[])).unwrap();
    let ckpt = tempfile::tempdir().unwrap();
    let key = format!("checkpoint_dir={:?}", ckpt.path().to_str().unwrap());
    let with_ckpt = small(&[&key]);
    let first = run_experiment(&with_ckpt).unwrap();
    let resumed = run_experiment(&with_ckpt).unwrap();
    assert_eq!(first.curves, plain.curves);
    assert_eq!(resumed.curves, plain.curves);
    assert_eq!(resumed.iterations, plain.iterations);
    assert_eq!(resumed.final_test_acc, plain.final_test_acc);
}

#[test]
fn checkpoints_from_another_config_are_rejected() {
    let ckpt = tempfile::tempdir().unwrap();
    let key = format!("checkpoint_dir={:?}", ckpt.path().to_str().unwrap());
    run_experiment(&small(&[&key])).unwrap();
    assert!(run_experiment(&small(&[&key, "seeds.noise=8"])).is_err());
}

#[test]
fn ablation_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let variants = [Variant::Baseline, Variant::SelfFull, Variant::DeleteRemoved];
    let rows = run_ablation_suite(&small(&[]), &variants, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(lines(&dir.path().join("table.csv")), 4);
    for v in variants {
        assert!(dir.path().join(v.name()).join("summary.json").exists());
    }
    assert_eq!(rows[0].iterations, 1);
}

#[test]
fn every_variant_runs() {
    for v in Variant::ALL {
        let name = format!("variant={:?}", v.name());
        let report = run_experiment(&small(&[&name])).unwrap();
        assert!(report.abort.is_none(), "{v}");
        let acc = report.final_test_acc.unwrap();
        assert!((0.0..=1.0).contains(&acc), "{v}");
    }
}
