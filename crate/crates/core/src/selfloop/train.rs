use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{early_stop_check, forward_probs, Accumulation, EarlyStopConfig};
use crate::datagen::{compose_batch, BatchPlan, Dataset, LabelStatus};
use crate::ensemble::{teacher_ema_update, PredictionEnsemble, TeacherState};
use crate::error::{Error, Result};
use crate::losses::{evaluate_batch, BatchTargets, EntropyScope, LossBreakdown, LossConfig};
use crate::ndnum::{
    backward_cached, forward_cached, mlp_forward, sgd_nesterov_step, softmax_rows, MlpParams,
    OptimizerState, Tensor2,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 2e-4,
        }
    }
}

/// Samples that feed the unlabeled batch slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupervisedPool {
    /// Every training sample, removed labels included.
    #[default]
    All,
    /// Only samples whose label is still Active; removed samples vanish.
    ActiveOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub plan: BatchPlan,
    /// Teacher EMA decay; 0 makes the teacher a copy of the student.
    pub teacher_decay: f64,
    pub unsupervised_pool: UnsupervisedPool,
    pub accumulation: Accumulation,
    pub batch_seed: u64,
    /// Standard deviation of Gaussian noise added to training inputs, drawn
    /// separately for the student and the teacher. Evaluation is noise-free.
    pub input_noise_std: f64,
}

/// Student and teacher weights to continue from.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub student: MlpParams,
    pub teacher: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub iteration: usize,
    /// Epoch within the iteration, starting at 0.
    pub epoch: usize,
    /// Epoch counted across all iterations.
    pub global_epoch: usize,
    /// Per-term losses averaged over the epoch's batches.
    pub train_loss: LossBreakdown,
    pub student_val_acc: f64,
    pub teacher_val_acc: f64,
    pub test_acc: Option<f64>,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutcome {
    pub best_teacher: MlpParams,
    pub best_student: MlpParams,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub epochs: Vec<EpochRecord>,
}

/// One filter iteration's worth of training.
pub trait IterationTrainer {
    /// Trains on the Active labels of `train`, for at most
    /// `min(max_epochs_per_iteration, total_epoch_budget - epochs_used)` epochs.
    fn train_iteration(
        &mut self,
        iteration: usize,
        train: &Dataset,
        ens: &mut PredictionEnsemble,
        warm: Option<&WarmStart>,
        early_stop: &EarlyStopConfig,
        epochs_used: usize,
    ) -> Result<IterationOutcome>;

    /// Class probabilities of `params` on every training sample.
    fn predict(&self, params: &MlpParams, train: &Dataset) -> Result<Tensor2>;
}

pub fn predict_probs(params: &MlpParams, features: &Tensor2) -> Result<Tensor2> {
    forward_probs(params, features)
}

/// Fraction of rows whose argmax matches `labels`.
pub fn accuracy(params: &MlpParams, features: &Tensor2, labels: &[usize]) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = mlp_forward(params, features)?
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Student/teacher training with consistency targets and early stopping on
/// the teacher's validation accuracy.
pub struct MeanTeacherTrainer<'a> {
    pub config: TrainConfig,
    /// Cold-start weights.
    pub init: MlpParams,
    pub val: &'a Dataset,
    /// Evaluated each epoch for the curves only.
    pub monitor: Option<&'a Dataset>,
    /// Every epoch trained so far, kept even when an iteration aborts.
    pub log: Vec<EpochRecord>,
}

impl<'a> MeanTeacherTrainer<'a> {
    pub fn new(config: TrainConfig, init: MlpParams, val: &'a Dataset) -> Result<Self> {
        if val.is_empty() {
            return Err(Error::InvalidSpec("validation set is empty".into()));
        }
        if !(0.0..=1.0).contains(&config.teacher_decay) {
            return Err(Error::Config(format!(
                "teacher decay must lie in [0, 1], got {}",
                config.teacher_decay
            )));
        }
        if !(0.0..1.0).contains(&config.optimizer.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                config.optimizer.momentum
            )));
        }
        config.loss.validate()?;
        Ok(Self {
            config,
            init,
            val,
            monitor: None,
            log: Vec::new(),
        })
    }

    pub fn with_monitor(mut self, monitor: &'a Dataset) -> Self {
        self.monitor = Some(monitor);
        self
    }

    fn targets(&self, train: &Dataset, labeled: &[usize], unlabeled: &[usize]) -> BatchTargets {
        let rows = labeled.len() + unlabeled.len();
        let mut t = BatchTargets {
            supervised: Vec::with_capacity(rows),
            push_away: Vec::with_capacity(rows),
            entropy_rows: Vec::with_capacity(rows),
        };
        for (slot, &id) in labeled.iter().chain(unlabeled).enumerate() {
            let record = &train.labels[id];
            let removed = record.status == LabelStatus::Removed;
            t.supervised
                .push((slot < labeled.len()).then_some(record.original_label));
            t.push_away.push(removed.then_some(record.original_label));
            t.entropy_rows.push(match self.config.loss.entropy_scope {
                EntropyScope::All => true,
                EntropyScope::RemovedOnly => removed,
            });
        }
        t
    }
}

impl IterationTrainer for MeanTeacherTrainer<'_> {
    fn train_iteration(
        &mut self,
        iteration: usize,
        train: &Dataset,
        ens: &mut PredictionEnsemble,
        warm: Option<&WarmStart>,
        early_stop: &EarlyStopConfig,
        epochs_used: usize,
    ) -> Result<IterationOutcome> {
        let cfg = &self.config.clone();
        let max_epochs = early_stop
            .max_epochs_per_iteration
            .min(early_stop.total_epoch_budget.saturating_sub(epochs_used));
        if max_epochs == 0 {
            return Err(Error::Config("total epoch budget is exhausted".into()));
        }
        let active = train.active_indices();
        let pool = match cfg.unsupervised_pool {
            UnsupervisedPool::All => train.all_indices(),
            UnsupervisedPool::ActiveOnly => active.clone(),
        };
        let (mut student, teacher_start) = match warm {
            Some(w) => (w.student.clone(), w.teacher.clone()),
            None => (self.init.clone(), self.init.clone()),
        };
        student.check_shape(&teacher_start, "teacher")?;
        let mut teacher = TeacherState::from_params(teacher_start, cfg.teacher_decay)?;

        let first = compose_batch(&active, &pool, &cfg.plan, cfg.batch_seed, epochs_used as u64)?;
        let total_steps = early_stop.max_epochs_per_iteration * first.len().max(1);
        let mut opt = OptimizerState::new(
            &student,
            cfg.optimizer.lr,
            cfg.optimizer.weight_decay,
            total_steps,
        )?;

        let val_labels = self.val.original_labels();
        let test_labels = self.monitor.map(|m| m.true_labels());
        let mut history = Vec::with_capacity(max_epochs);
        let mut epochs = Vec::with_capacity(max_epochs);
        let mut best = (teacher.params().clone(), student.clone());
        let mut pending = Some(first);

        for epoch in 0..max_epochs {
            let global_epoch = epochs_used + epoch;
            let batches = match pending.take() {
                Some(b) => b,
                None => compose_batch(&active, &pool, &cfg.plan, cfg.batch_seed, global_epoch as u64)?,
            };
            let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.batch_seed ^ NOISE_SEED_MIX);
            noise_rng.set_stream(global_epoch as u64);
            let mut sums = LossBreakdown::default();
            let mut clamped = 0;
            for batch in &batches {
                let rows: Vec<usize> = batch.labeled.iter().chain(&batch.unlabeled).copied().collect();
                let x = train.features.gather_rows(&rows)?;
                let x_student = perturb(&x, cfg.input_noise_std, &mut noise_rng);
                let cache = forward_cached(&student, &x_student)?;
                let s_probs = softmax_rows(cache.logits());
                let teacher_out = if cfg.loss.needs_teacher() {
                    let x_teacher = perturb(&x, cfg.input_noise_std, &mut noise_rng);
                    let logits = mlp_forward(teacher.params(), &x_teacher)?;
                    let probs = softmax_rows(&logits);
                    Some((logits, probs))
                } else {
                    None
                };
                let targets = self.targets(train, &batch.labeled, &batch.unlabeled);
                let eval = evaluate_batch(
                    &cfg.loss,
                    global_epoch,
                    cache.logits(),
                    &s_probs,
                    teacher_out.as_ref().map(|(l, p)| (l, p)),
                    &targets,
                )?;
                if !eval.breakdown.total.is_finite() || !eval.logit_grad.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at iteration {iteration}, epoch {epoch} \
                         (global {global_epoch}): {:?}",
                        eval.breakdown
                    )));
                }
                clamped += eval.clamped;
                accumulate(&mut sums, &eval.breakdown);
                let grads = backward_cached(&student, &cache, &eval.logit_grad)?;
                sgd_nesterov_step(&mut student, &grads, &mut opt, cfg.optimizer.momentum)?;
                teacher_ema_update(&mut teacher, &student)?;
            }
            if !student.is_finite() {
                return Err(Error::Numerical(format!(
                    "student weights diverged at iteration {iteration}, epoch {epoch}"
                )));
            }
            scale(&mut sums, 1.0 / batches.len().max(1) as f64);

            if cfg.accumulation == Accumulation::PerEpoch {
                ens.update_all(&forward_probs(teacher.params(), &train.features)?)?;
            }
            let student_val_acc = accuracy(&student, &self.val.features, &val_labels)?;
            let teacher_val_acc = accuracy(teacher.params(), &self.val.features, &val_labels)?;
            let test_acc = match (self.monitor, &test_labels) {
                (Some(m), Some(labels)) => Some(accuracy(teacher.params(), &m.features, labels)?),
                _ => None,
            };
            let record = EpochRecord {
                iteration,
                epoch,
                global_epoch,
                train_loss: sums,
                student_val_acc,
                teacher_val_acc,
                test_acc,
                clamped,
            };
            self.log.push(record.clone());
            epochs.push(record);
            history.push(teacher_val_acc);
            let (stop, best_index) = early_stop_check(&history, early_stop.patience)?;
            if best_index == epoch {
                best = (teacher.params().clone(), student.clone());
            }
            if stop {
                break;
            }
        }

        let (_, best_epoch) = early_stop_check(&history, early_stop.patience)?;
        Ok(IterationOutcome {
            best_teacher: best.0,
            best_student: best.1,
            best_val_acc: history[best_epoch],
            best_epoch,
            epochs_run: history.len(),
            epochs,
        })
    }

    fn predict(&self, params: &MlpParams, train: &Dataset) -> Result<Tensor2> {
        forward_probs(params, &train.features)
    }
}

const NOISE_SEED_MIX: u64 = 0x1A9E_17F0_0D5E_ED00;

fn perturb(x: &Tensor2, std: f64, rng: &mut ChaCha8Rng) -> Tensor2 {
    let mut out = x.clone();
    if std > 0.0 {
        out.as_mut_slice().iter_mut().for_each(|v| {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        });
    }
    out
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.supervised += b.supervised;
    acc.consistency += b.consistency;
    acc.logit_distance += b.logit_distance;
    acc.entropy_min += b.entropy_min;
    acc.mean_entropy_max += b.mean_entropy_max;
    acc.push_away += b.push_away;
    acc.total += b.total;
}

fn scale(acc: &mut LossBreakdown, s: f64) {
    acc.supervised *= s;
    acc.consistency *= s;
    acc.logit_distance *= s;
    acc.entropy_min *= s;
    acc.mean_entropy_max *= s;
    acc.push_away *= s;
    acc.total *= s;
}
