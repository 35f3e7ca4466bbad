mod common;

use common::blobs::{blobs, early, one_epoch, train_cfg};
use self_ensemble::datagen::{compose_batch, BatchPlan, LabelStatus};
use self_ensemble::ensemble::PredictionEnsemble;
use self_ensemble::losses::{LossConfig, LossTerm};
use self_ensemble::ndnum::MlpParams;
use self_ensemble::selfloop::{
    self_run, IterationTrainer, LoopConfig, MeanTeacherTrainer, WarmStart,
};
use self_ensemble::harness::{build_splits, resolve, ExperimentConfig};
use self_ensemble::Error;

#[test]
fn removed_labels_leave_the_supervised_loss_but_not_the_stream() {
    let (ds, val) = blobs(30, 10, 3);
    let mut removed = ds.clone();
    for id in (0..ds.len()).step_by(3) {
        removed.labels[id].status = LabelStatus::Removed;
    }

    // Labeled slots only ever hold Active samples; every sample is unlabeled once.
    let plan = BatchPlan::new(32, 8).unwrap();
    let batches = compose_batch(&removed.active_indices(), &removed.all_indices(), &plan, 4, 0).unwrap();
    for b in &batches {
        assert!(b.labeled.iter().all(|&i| removed.labels[i].is_active()));
    }
    let mut stream: Vec<usize> = batches.iter().flat_map(|b| b.unlabeled.clone()).collect();
    stream.sort_unstable();
    assert_eq!(stream, removed.all_indices());

    let semi = LossConfig {
        enabled: vec![LossTerm::Supervised, LossTerm::Consistency, LossTerm::LogitDistance],
        ..LossConfig::default()
    };
    let reference = one_epoch(&removed, &val, semi.clone());

    // The label of a removed sample is never read.
    let mut relabelled = removed.clone();
    for id in removed.removed_indices() {
        let r = &mut relabelled.labels[id];
        r.original_label = (r.original_label + 1) % 4;
    }
    assert_eq!(one_epoch(&relabelled, &val, semi.clone()), reference);

    // Its features still feed the unsupervised terms.
    let mut moved = removed.clone();
    let id = removed.removed_indices()[0];
    moved.features.row_mut(id).iter_mut().for_each(|v| *v += 3.0);
    assert_ne!(one_epoch(&moved, &val, semi), reference);

    // Without unsupervised terms the moved sample has no influence at all.
    let sup = LossConfig::supervised_only();
    assert_eq!(one_epoch(&moved, &val, sup.clone()), one_epoch(&removed, &val, sup));
}

#[test]
fn clean_blobs_reach_high_teacher_accuracy_and_filter_almost_nothing() {
    let (train, val) = blobs(100, 25, 5);
    let init = MlpParams::init_he(&[6, 16, 4], 2).unwrap();
    let mut trainer = MeanTeacherTrainer::new(train_cfg(LossConfig::default()), init, &val).unwrap();
    let mut ens = PredictionEnsemble::new(train.len(), 4, 0.6).unwrap();
    let cfg = LoopConfig {
        early_stop: early(30, 10),
        max_filter_iterations: 3,
        ..Default::default()
    };
    let out = self_run(&mut trainer, &train, &mut ens, &cfg, None).unwrap();
    assert!(out.iterations[0].best_val_acc >= 0.99, "{:?}", out.iterations[0]);
    for it in &out.iterations {
        let removed = it.active_count_before - it.active_count_after.min(it.active_count_before);
        assert!((removed as f64) < 0.01 * train.len() as f64, "{it:?}");
    }
}

#[test]
fn warm_start_reaches_its_best_sooner_than_cold_start() {
    let cfg = ExperimentConfig::from_toml_with_overrides(
        "",
        &[
            "teacher.input_noise_std=0.5".into(),
            "loss.consistency_weight=10".into(),
        ],
    )
    .unwrap();
    let splits = build_splits(&cfg).unwrap();
    let resolved = resolve(&cfg).unwrap();
    let train = &splits.train;
    let init = MlpParams::init_he(&[20, 64, 64, 10], cfg.seeds.init).unwrap();
    let mut trainer = MeanTeacherTrainer::new(resolved.train, init, &splits.val).unwrap();
    let mut ens = PredictionEnsemble::new(train.len(), 10, 0.6).unwrap();
    let stop = early(40, 10);
    let first = trainer
        .train_iteration(0, train, &mut ens, None, &stop, 0)
        .unwrap();

    let mut filtered = train.clone();
    for r in &mut filtered.labels {
        if r.is_noisy() {
            r.status = LabelStatus::Removed;
        }
    }
    let warm = WarmStart {
        student: first.best_student.clone(),
        teacher: first.best_teacher.clone(),
    };
    let mut ens_w = ens.clone();
    let warm_run = trainer
        .train_iteration(1, &filtered, &mut ens_w, Some(&warm), &stop, first.epochs_run)
        .unwrap();
    let mut ens_c = ens.clone();
    let cold_run = trainer
        .train_iteration(1, &filtered, &mut ens_c, None, &stop, first.epochs_run)
        .unwrap();
    assert!(
        warm_run.best_epoch < cold_run.best_epoch,
        "warm best at {}, cold best at {}",
        warm_run.best_epoch,
        cold_run.best_epoch
    );
}

#[test]
fn teacher_curves_match_student_curves_in_length() {
    let (train, val) = blobs(20, 5, 11);
    let init = MlpParams::init_he(&[6, 8, 4], 2).unwrap();
    let mut trainer = MeanTeacherTrainer::new(train_cfg(LossConfig::default()), init, &val).unwrap();
    let mut ens = PredictionEnsemble::new(train.len(), 4, 0.6).unwrap();
    let out = trainer
        .train_iteration(0, &train, &mut ens, None, &early(12, 3), 0)
        .unwrap();
    assert_eq!(out.epochs.len(), out.epochs_run);
    assert!(out.epochs.iter().enumerate().all(|(i, e)| e.epoch == i));
    // Per-epoch accumulation touches every row once per epoch.
    assert_eq!(ens.updates_applied, (out.epochs_run * train.len()) as u64);
}

#[test]
fn degenerate_inputs_are_errors() {
    let (train, val) = blobs(5, 2, 1);
    let init = MlpParams::init_he(&[6, 4], 2).unwrap();
    let mut trainer = MeanTeacherTrainer::new(train_cfg(LossConfig::default()), init.clone(), &val).unwrap();
    let mut none_active = train.clone();
    none_active.labels.iter_mut().for_each(|r| r.status = LabelStatus::Removed);
    let mut ens = PredictionEnsemble::new(train.len(), 4, 0.6).unwrap();
    let err = trainer
        .train_iteration(0, &none_active, &mut ens, None, &early(2, 1), 0)
        .unwrap_err();
    assert!(matches!(err, Error::DegenerateBatch(_)), "{err}");

    let empty_val = val.subset(&[]).unwrap();
    assert!(MeanTeacherTrainer::new(train_cfg(LossConfig::default()), init, &empty_val).is_err());
}

#[test]
fn diverging_training_aborts_with_a_numerical_error() {
    let (train, val) = blobs(20, 5, 1);
    let init = MlpParams::init_he(&[6, 8, 4], 2).unwrap();
    let mut cfg = train_cfg(LossConfig::supervised_only());
    cfg.optimizer.lr = 1e300;
    let mut trainer = MeanTeacherTrainer::new(cfg, init, &val).unwrap();
    let mut ens = PredictionEnsemble::new(train.len(), 4, 0.6).unwrap();
    let err = trainer
        .train_iteration(0, &train, &mut ens, None, &early(5, 2), 0)
        .unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
}
