//! The filtering controller: per-iteration training with early stopping,
//! label filtering against the original label set, and the outer loop that
//! keeps going while validation accuracy does not drop.

mod checkpoint;
mod run;
mod train;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, LabelStatus};
use crate::ensemble::{agreement_keep, prediction_ema_update, FilterStrategy, PredictionEnsemble};
use crate::error::{Error, Result};
use crate::ndnum::{mlp_forward, softmax_rows, MlpParams, Tensor2};

pub use checkpoint::Checkpointer;
pub(crate) use checkpoint::write_atomic;
pub use run::{self_run, LoopConfig, SelfRunOutput};
pub use train::{
    accuracy, predict_probs, EpochRecord, IterationOutcome, IterationTrainer, MeanTeacherTrainer,
    OptimizerConfig, TrainConfig, UnsupervisedPool, WarmStart,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub max_epochs_per_iteration: usize,
    pub patience: usize,
    /// Cap on epochs summed over all filter iterations.
    pub total_epoch_budget: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            max_epochs_per_iteration: 300,
            patience: 50,
            total_epoch_budget: 600,
        }
    }
}

impl EarlyStopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs_per_iteration == 0 || self.patience == 0 || self.total_epoch_budget == 0
        {
            return Err(Error::Config("early-stop counts must all be > 0".into()));
        }
        if self.patience > self.max_epochs_per_iteration {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs_per_iteration {}",
                self.patience, self.max_epochs_per_iteration
            )));
        }
        Ok(())
    }
}

/// When the prediction ensemble absorbs new predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    /// Teacher predictions on every training sample after each epoch.
    #[default]
    PerEpoch,
    /// One pass of the best teacher right before filtering.
    PerIteration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterMode {
    pub accumulation: Accumulation,
    pub strategy: FilterStrategy,
}

/// Summary of one filter iteration.
///
/// `active_count_before`, `filter_precision` and `filter_recall` describe the
/// label set this iteration trained on; `active_count_after` is the size of
/// the label set produced by filtering with this iteration's ensemble, or
/// equals `active_count_before` when no filtering followed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub iteration: usize,
    pub best_teacher: MlpParams,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub active_count_before: usize,
    pub active_count_after: usize,
    pub filter_precision: f64,
    pub filter_recall: f64,
}

/// Returns `(stop, best_index)` for a validation-accuracy history.
///
/// The best index is the first position of the maximum; training stops once
/// `patience` epochs have passed without beating it.
pub fn early_stop_check(history: &[f64], patience: usize) -> Result<(bool, usize)> {
    if history.is_empty() {
        return Err(Error::InvalidSpec("early-stop history is empty".into()));
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    Ok((history.len() - 1 - best >= patience, best))
}

/// Precision and recall of the Active label set against the hidden true labels.
pub fn precision_recall(dataset: &Dataset) -> (f64, f64) {
    let mut kept = 0usize;
    let mut kept_clean = 0usize;
    let mut clean = 0usize;
    for r in &dataset.labels {
        let is_clean = !r.is_noisy();
        clean += is_clean as usize;
        if r.is_active() {
            kept += 1;
            kept_clean += is_clean as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(kept_clean, kept), ratio(kept_clean, clean))
}

/// Result of a filtering pass.
#[derive(Clone, Debug)]
pub struct Filtered {
    pub dataset: Dataset,
    /// Decisions that fell on an exact score tie.
    pub ties: usize,
}

/// Filters `dataset` with the ensemble, restarting from the original labels.
///
/// In per-iteration mode the teacher's predictions are folded into `ens`
/// first. Every status is reset to Active, then each label that disagrees
/// with its ensemble row is marked Removed.
pub fn filter_labels(
    dataset: &Dataset,
    ens: &mut PredictionEnsemble,
    best_teacher: &MlpParams,
    mode: FilterMode,
) -> Result<Filtered> {
    let fold = match mode.accumulation {
        Accumulation::PerIteration => Some(predict_probs(best_teacher, &dataset.features)?),
        Accumulation::PerEpoch => None,
    };
    filter_with_predictions(dataset, ens, fold.as_ref(), mode.strategy)
}

/// [`filter_labels`] with the per-iteration predictions supplied directly.
pub fn filter_with_predictions(
    dataset: &Dataset,
    ens: &mut PredictionEnsemble,
    fold: Option<&Tensor2>,
    strategy: FilterStrategy,
) -> Result<Filtered> {
    if ens.samples() != dataset.len() || ens.classes() != dataset.class_count {
        return Err(Error::Shape(format!(
            "ensemble is {}x{} but dataset has {} samples and {} classes",
            ens.samples(),
            ens.classes(),
            dataset.len(),
            dataset.class_count
        )));
    }
    strategy.validate(dataset.class_count)?;
    if let Some(probs) = fold {
        if probs.rows() != dataset.len() {
            return Err(Error::Shape(format!(
                "{} prediction rows for {} samples",
                probs.rows(),
                dataset.len()
            )));
        }
        for i in 0..probs.rows() {
            prediction_ema_update(ens, i, probs.row(i))?;
        }
    }
    let mut out = dataset.clone();
    let mut ties = 0;
    for record in &mut out.labels {
        let agreement = agreement_keep(ens, record.sample_id, record.original_label, strategy)?;
        ties += agreement.tie as usize;
        record.status = if agreement.keep {
            LabelStatus::Active
        } else {
            LabelStatus::Removed
        };
    }
    Ok(Filtered { dataset: out, ties })
}

pub(crate) fn forward_probs(params: &MlpParams, features: &Tensor2) -> Result<Tensor2> {
    Ok(softmax_rows(&mlp_forward(params, features)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{inject_symmetric, LabelRecord};

    #[test]
    fn early_stop_examples() {
        assert_eq!(early_stop_check(&[0.5], 1).unwrap(), (false, 0));
        assert_eq!(early_stop_check(&[0.9, 0.8, 0.8], 2).unwrap(), (true, 0));
        assert_eq!(early_stop_check(&[0.1, 0.2, 0.3, 0.9], 1).unwrap(), (false, 3));
        assert_eq!(early_stop_check(&[0.7, 0.7], 1).unwrap(), (true, 0));
        assert!(early_stop_check(&[], 1).is_err());
    }

    #[test]
    fn early_stop_config_checks() {
        assert!(EarlyStopConfig::default().validate().is_ok());
        let bad = EarlyStopConfig {
            patience: 400,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn noisy_dataset() -> Dataset {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let features = Tensor2::zeros(40, 3);
        let clean = Dataset::clean(features, &labels, 4).unwrap();
        let noisy = inject_symmetric(&labels, 0.5, 4, 9).unwrap();
        clean.with_labels(noisy).unwrap()
    }

    fn one_hot_ensemble(ds: &Dataset, shift: usize) -> PredictionEnsemble {
        let k = ds.class_count;
        let mut ens = PredictionEnsemble::new(ds.len(), k, 0.0).unwrap();
        let mut pred = Tensor2::zeros(ds.len(), k);
        for r in &ds.labels {
            pred.row_mut(r.sample_id)[(r.original_label + shift) % k] = 1.0;
        }
        ens.update_all(&pred).unwrap();
        ens
    }

    #[test]
    fn full_agreement_keeps_everything() {
        let ds = noisy_dataset();
        let mut ens = one_hot_ensemble(&ds, 0);
        let out = filter_with_predictions(&ds, &mut ens, None, FilterStrategy::ArgmaxAgreement)
            .unwrap();
        assert_eq!(out.dataset.active_count(), ds.len());
        assert_eq!(out.ties, 0);
    }

    #[test]
    fn full_disagreement_removes_everything() {
        let ds = noisy_dataset();
        let mut ens = one_hot_ensemble(&ds, 1);
        let out = filter_with_predictions(&ds, &mut ens, None, FilterStrategy::ArgmaxAgreement)
            .unwrap();
        assert_eq!(out.dataset.active_count(), 0);
        assert_eq!(out.dataset.removed_indices().len(), ds.len());
        for (a, b) in out.dataset.labels.iter().zip(&ds.labels) {
            assert_eq!(a.original_label, b.original_label);
            assert_eq!(a.true_label, b.true_label);
        }
        assert_eq!(out.dataset.features, ds.features);
    }

    #[test]
    fn per_iteration_fold_uses_teacher_predictions() {
        let ds = noisy_dataset();
        let mut ens = PredictionEnsemble::new(ds.len(), 4, 0.0).unwrap();
        let mut pred = Tensor2::zeros(ds.len(), 4);
        for r in &ds.labels {
            pred.row_mut(r.sample_id)[r.true_label] = 1.0;
        }
        let out =
            filter_with_predictions(&ds, &mut ens, Some(&pred), FilterStrategy::ArgmaxAgreement)
                .unwrap();
        for r in &out.dataset.labels {
            assert_eq!(r.is_active(), !r.is_noisy());
        }
        let (precision, recall) = precision_recall(&out.dataset);
        assert_eq!((precision, recall), (1.0, 1.0));
    }

    #[test]
    fn precision_recall_by_hand() {
        let records = vec![
            LabelRecord {
                sample_id: 0,
                original_label: 0,
                true_label: 0,
                status: LabelStatus::Active,
            },
            LabelRecord {
                sample_id: 1,
                original_label: 1,
                true_label: 0,
                status: LabelStatus::Active,
            },
            LabelRecord {
                sample_id: 2,
                original_label: 1,
                true_label: 1,
                status: LabelStatus::Removed,
            },
        ];
        let ds = Dataset::new(Tensor2::zeros(3, 1), records, 2).unwrap();
        assert_eq!(precision_recall(&ds), (0.5, 0.5));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ds = noisy_dataset();
        let mut ens = PredictionEnsemble::new(3, 4, 0.5).unwrap();
        assert!(
            filter_with_predictions(&ds, &mut ens, None, FilterStrategy::ArgmaxAgreement).is_err()
        );
    }
}
