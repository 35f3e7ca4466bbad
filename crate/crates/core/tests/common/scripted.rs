use self_ensemble::datagen::{Dataset, LabelStatus};
use self_ensemble::ensemble::PredictionEnsemble;
use self_ensemble::ndnum::{MlpParams, Tensor2};
use self_ensemble::selfloop::{
    Accumulation, EarlyStopConfig, FilterMode, IterationOutcome, IterationTrainer, LoopConfig,
    WarmStart,
};
use self_ensemble::Result;

/// Replays fixed validation accuracies and ensemble predictions.
pub struct Scripted {
    pub accs: Vec<f64>,
    pub preds: Vec<Tensor2>,
    pub trained_on: Vec<Vec<LabelStatus>>,
    pub warm_seen: Vec<Option<f64>>,
}

impl Scripted {
    pub fn new(accs: &[f64], preds: Vec<Tensor2>) -> Self {
        Self {
            accs: accs.to_vec(),
            preds,
            trained_on: Vec::new(),
            warm_seen: Vec::new(),
        }
    }
}

pub fn tagged(tag: f64) -> MlpParams {
    MlpParams::from_flat(&[1, 2], vec![tag, 0.0, 0.0, 0.0]).unwrap()
}

impl IterationTrainer for Scripted {
    fn train_iteration(
        &mut self,
        iteration: usize,
        train: &Dataset,
        ens: &mut PredictionEnsemble,
        warm: Option<&WarmStart>,
        _early_stop: &EarlyStopConfig,
        _epochs_used: usize,
    ) -> Result<IterationOutcome> {
        self.trained_on
            .push(train.labels.iter().map(|r| r.status).collect());
        self.warm_seen.push(warm.map(|w| w.teacher.values()[0]));
        if let Some(p) = self.preds.get(iteration) {
            ens.update_all(p)?;
        }
        Ok(IterationOutcome {
            best_teacher: tagged(iteration as f64),
            best_student: tagged(iteration as f64 + 0.5),
            best_val_acc: self.accs[iteration],
            best_epoch: 0,
            epochs_run: 1,
            epochs: Vec::new(),
        })
    }

    fn predict(&self, _params: &MlpParams, train: &Dataset) -> Result<Tensor2> {
        let last = self.trained_on.len() - 1;
        match self.preds.get(last) {
            Some(p) => Ok(p.clone()),
            None => Ok(Tensor2::zeros(train.len(), train.class_count)),
        }
    }
}

pub fn toy(labels: &[usize]) -> Dataset {
    Dataset::clean(Tensor2::zeros(labels.len(), 1), labels, 2).unwrap()
}

pub fn one_hot(classes: &[usize]) -> Tensor2 {
    let mut t = Tensor2::zeros(classes.len(), 2);
    for (i, &c) in classes.iter().enumerate() {
        t.row_mut(i)[c] = 1.0;
    }
    t
}

pub fn loop_cfg(accumulation: Accumulation) -> LoopConfig {
    LoopConfig {
        filter: FilterMode {
            accumulation,
            ..Default::default()
        },
        ..Default::default()
    }
}
