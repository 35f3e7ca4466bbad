use self_ensemble::datagen::{make_blobs, BatchPlan, Dataset};
use self_ensemble::ensemble::PredictionEnsemble;
use self_ensemble::losses::LossConfig;
use self_ensemble::ndnum::MlpParams;
use self_ensemble::selfloop::{
    Accumulation, EarlyStopConfig, IterationTrainer, MeanTeacherTrainer, OptimizerConfig,
    TrainConfig, UnsupervisedPool,
};

/// Train and validation splits drawn from the same four clusters.
pub fn blobs(train_per_class: usize, val_per_class: usize, seed: u64) -> (Dataset, Dataset) {
    let m = train_per_class + val_per_class;
    let all = make_blobs(4, m, 6, 1.0, seed).unwrap();
    let (val_ids, train_ids): (Vec<usize>, Vec<usize>) =
        (0..all.len()).partition(|i| i % m < val_per_class);
    (all.subset(&train_ids).unwrap(), all.subset(&val_ids).unwrap())
}

pub fn train_cfg(loss: LossConfig) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::default(),
        plan: if loss.has_unsupervised_terms() {
            BatchPlan::new(32, 8).unwrap()
        } else {
            BatchPlan::supervised_only(32).unwrap()
        },
        loss,
        teacher_decay: 0.9,
        unsupervised_pool: UnsupervisedPool::All,
        accumulation: Accumulation::PerEpoch,
        batch_seed: 4,
        input_noise_std: 0.0,
    }
}

pub fn early(max: usize, patience: usize) -> EarlyStopConfig {
    EarlyStopConfig {
        max_epochs_per_iteration: max,
        patience,
        total_epoch_budget: 1000,
    }
}

pub fn one_epoch(train: &Dataset, val: &Dataset, loss: LossConfig) -> MlpParams {
    let init = MlpParams::init_he(&[6, 8, 4], 1).unwrap();
    let mut trainer = MeanTeacherTrainer::new(train_cfg(loss), init, val).unwrap();
    let mut ens = PredictionEnsemble::new(train.len(), 4, 0.6).unwrap();
    trainer
        .train_iteration(0, train, &mut ens, None, &early(1, 1), 0)
        .unwrap()
        .best_student
}
