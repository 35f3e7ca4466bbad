use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpointer, IterationRecord};
use super::train::{EpochRecord, IterationTrainer, WarmStart};
use super::{filter_with_predictions, precision_recall, Accumulation, EarlyStopConfig, FilterMode, IterationResult};
use crate::datagen::{Dataset, LabelStatus};
use crate::ensemble::PredictionEnsemble;
use crate::error::{Error, Result};
use crate::ndnum::MlpParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub filter: FilterMode,
    pub early_stop: EarlyStopConfig,
    /// Number of filtering passes allowed; 0 trains once on the noisy labels.
    pub max_filter_iterations: usize,
    /// Continue each iteration from the previous best student and teacher.
    pub warm_start: bool,
    /// Zero the prediction ensemble before every iteration after the first.
    pub reset_ensemble: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            filter: FilterMode::default(),
            early_stop: EarlyStopConfig::default(),
            max_filter_iterations: 10,
            warm_start: true,
            reset_ensemble: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SelfRunOutput {
    pub iterations: Vec<IterationResult>,
    pub epochs: Vec<EpochRecord>,
    pub best_iteration: usize,
    pub best_teacher: MlpParams,
    /// The label set the best teacher was trained on.
    pub best_label_set: Dataset,
    /// The Active set when the loop ended: the last label set trained on.
    pub final_label_set: Dataset,
    pub epochs_used: usize,
    pub tie_count: usize,
}

struct Best {
    iteration: usize,
    val_acc: f64,
    warm: WarmStart,
    labels: Dataset,
}

struct LoopState {
    iterations: Vec<IterationResult>,
    epochs: Vec<EpochRecord>,
    best: Option<Best>,
    current: Dataset,
    epochs_used: usize,
    ties: usize,
    finished: bool,
}

/// Runs the filtering loop to completion.
///
/// Iteration 0 trains on every original label. After each iteration that
/// matches or beats the best validation accuracy so far, labels are filtered
/// again from the original set and training continues; the first strictly
/// worse iteration, the iteration cap, or the epoch budget ends the loop.
/// With a checkpointer, completed iterations are persisted and a rerun
/// resumes after the last one found on disk.
pub fn self_run(
    trainer: &mut dyn IterationTrainer,
    train: &Dataset,
    ens: &mut PredictionEnsemble,
    cfg: &LoopConfig,
    checkpoint: Option<&Checkpointer>,
) -> Result<SelfRunOutput> {
    cfg.early_stop.validate()?;
    cfg.filter.strategy.validate(train.class_count)?;
    if ens.samples() != train.len() || ens.classes() != train.class_count {
        return Err(Error::Shape(format!(
            "ensemble is {}x{} but training set has {} samples and {} classes",
            ens.samples(),
            ens.classes(),
            train.len(),
            train.class_count
        )));
    }
    let mut l0 = train.clone();
    l0.labels.iter_mut().for_each(|r| r.status = LabelStatus::Active);

    let mut state = LoopState {
        iterations: Vec::new(),
        epochs: Vec::new(),
        best: None,
        current: l0.clone(),
        epochs_used: 0,
        ties: 0,
        finished: false,
    };
    if let Some(ckpt) = checkpoint {
        for record in ckpt.load_all()? {
            replay(&mut state, &l0, record, ckpt, ens)?;
        }
    }

    while !state.finished {
        let i = state.iterations.len();
        if cfg.reset_ensemble && i > 0 {
            ens.reset();
        }
        let warm = if cfg.warm_start {
            state.best.as_ref().map(|b| &b.warm)
        } else {
            None
        };
        let outcome = trainer.train_iteration(
            i,
            &state.current,
            ens,
            warm,
            &cfg.early_stop,
            state.epochs_used,
        )?;
        let epochs_used = state.epochs_used + outcome.epochs_run;
        let (precision, recall) = precision_recall(&state.current);
        let active = state.current.active_count();
        let improved = state
            .best
            .as_ref()
            .is_none_or(|b| outcome.best_val_acc >= b.val_acc);

        let mut next = None;
        let mut ties = 0;
        let mut finished = !improved;
        if improved {
            finished = i >= cfg.max_filter_iterations
                || epochs_used >= cfg.early_stop.total_epoch_budget;
            if !finished {
                let fold = match cfg.filter.accumulation {
                    Accumulation::PerIteration => {
                        Some(trainer.predict(&outcome.best_teacher, &l0)?)
                    }
                    Accumulation::PerEpoch => None,
                };
                let filtered =
                    filter_with_predictions(&l0, ens, fold.as_ref(), cfg.filter.strategy)?;
                ties = filtered.ties;
                next = Some(filtered.dataset);
            }
        }

        let record = IterationRecord {
            result: IterationResult {
                iteration: i,
                best_teacher: outcome.best_teacher,
                best_val_acc: outcome.best_val_acc,
                best_epoch: outcome.best_epoch,
                epochs_run: outcome.epochs_run,
                active_count_before: active,
                active_count_after: next.as_ref().map_or(active, |d| d.active_count()),
                filter_precision: precision,
                filter_recall: recall,
            },
            best_student: outcome.best_student,
            epochs: outcome.epochs,
            trained_statuses: statuses(&state.current),
            next_statuses: next.as_ref().map(statuses),
            epochs_used,
            ties,
            finished,
        };
        if let Some(ckpt) = checkpoint {
            ckpt.save(&record, ens)?;
        }
        replay_record(&mut state, &l0, record)?;
    }

    let best = state
        .best
        .ok_or_else(|| Error::Config("no iteration completed".into()))?;
    Ok(SelfRunOutput {
        iterations: state.iterations,
        epochs: state.epochs,
        best_iteration: best.iteration,
        best_teacher: best.warm.teacher,
        best_label_set: best.labels,
        final_label_set: state.current,
        epochs_used: state.epochs_used,
        tie_count: state.ties,
    })
}

fn statuses(ds: &Dataset) -> Vec<LabelStatus> {
    ds.labels.iter().map(|r| r.status).collect()
}

fn with_statuses(l0: &Dataset, statuses: &[LabelStatus]) -> Result<Dataset> {
    if statuses.len() != l0.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} statuses for {} samples",
            statuses.len(),
            l0.len()
        )));
    }
    let mut ds = l0.clone();
    ds.labels
        .iter_mut()
        .zip(statuses)
        .for_each(|(r, &s)| r.status = s);
    Ok(ds)
}

fn replay(
    state: &mut LoopState,
    l0: &Dataset,
    record: IterationRecord,
    ckpt: &Checkpointer,
    ens: &mut PredictionEnsemble,
) -> Result<()> {
    if record.result.iteration != state.iterations.len() || state.finished {
        return Err(Error::Config(format!(
            "checkpoint {} is out of sequence",
            ckpt.dir().display()
        )));
    }
    *ens = ckpt.load_ensemble(record.result.iteration)?;
    replay_record(state, l0, record)
}

fn replay_record(state: &mut LoopState, l0: &Dataset, record: IterationRecord) -> Result<()> {
    let improved = state
        .best
        .as_ref()
        .is_none_or(|b| record.result.best_val_acc >= b.val_acc);
    if improved {
        state.best = Some(Best {
            iteration: record.result.iteration,
            val_acc: record.result.best_val_acc,
            warm: WarmStart {
                student: record.best_student,
                teacher: record.result.best_teacher.clone(),
            },
            labels: with_statuses(l0, &record.trained_statuses)?,
        });
    }
    if let Some(next) = &record.next_statuses {
        state.current = with_statuses(l0, next)?;
    }
    state.epochs.extend(record.epochs);
    state.epochs_used = record.epochs_used;
    state.ties += record.ties;
    state.finished = record.finished || record.next_statuses.is_none();
    state.iterations.push(record.result);
    Ok(())
}
