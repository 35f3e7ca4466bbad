use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::datagen::BatchPlan;
use crate::error::{Error, Result};
use crate::losses::{EntropyScope, LossTerm};
use crate::selfloop::{Accumulation, LoopConfig, OptimizerConfig, TrainConfig, UnsupervisedPool};

/// Named component stacks compared in the ablation grid.
///
/// Each variant is a projection of the base configuration onto the same
/// training engine:
///
/// | variant | loss terms | teacher | filtering |
/// |---|---|---|---|
/// | `baseline` | supervised | none | none |
/// | `filter_only` | supervised | none | best model, no prediction EMA |
/// | `teacher_only` | configured | EMA | none |
/// | `self_no_pred_ema` | configured | EMA | best teacher, no prediction EMA |
/// | `self_full` | configured | EMA | as configured |
/// | `delete_removed` | configured | EMA | as configured, removed samples dropped |
/// | `push_away` | supervised + push-away | none | best model, no prediction EMA |
/// | `entropy_all` | supervised + entropy | none | best model, no prediction EMA |
/// | `entropy_unlabeled` | supervised + entropy on removed | none | best model, no prediction EMA |
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    FilterOnly,
    TeacherOnly,
    SelfNoPredEma,
    #[default]
    SelfFull,
    DeleteRemoved,
    PushAway,
    EntropyAll,
    EntropyUnlabeled,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Baseline,
        Variant::FilterOnly,
        Variant::TeacherOnly,
        Variant::SelfNoPredEma,
        Variant::SelfFull,
        Variant::DeleteRemoved,
        Variant::PushAway,
        Variant::EntropyAll,
        Variant::EntropyUnlabeled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::FilterOnly => "filter_only",
            Variant::TeacherOnly => "teacher_only",
            Variant::SelfNoPredEma => "self_no_pred_ema",
            Variant::SelfFull => "self_full",
            Variant::DeleteRemoved => "delete_removed",
            Variant::PushAway => "push_away",
            Variant::EntropyAll => "entropy_all",
            Variant::EntropyUnlabeled => "entropy_unlabeled",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Engine settings for one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub train: TrainConfig,
    pub loop_cfg: LoopConfig,
    pub alpha: f64,
}

/// Projects `cfg` onto the settings of `cfg.variant`.
pub fn resolve(cfg: &ExperimentConfig) -> Result<Resolved> {
    let mut loss = cfg.loss.clone();
    let mut decay = cfg.teacher.decay;
    let mut mode = cfg.filter.mode;
    let mut alpha = cfg.filter.alpha;
    let mut max_filter_iterations = cfg.filter.max_filter_iterations;
    let mut pool = UnsupervisedPool::All;

    let plain_filter = |mode: &mut crate::selfloop::FilterMode, alpha: &mut f64| {
        mode.accumulation = Accumulation::PerIteration;
        *alpha = 0.0;
    };
    match cfg.variant {
        Variant::Baseline => {
            loss.enabled = vec![LossTerm::Supervised];
            decay = 0.0;
            max_filter_iterations = 0;
        }
        Variant::FilterOnly => {
            loss.enabled = vec![LossTerm::Supervised];
            decay = 0.0;
            plain_filter(&mut mode, &mut alpha);
        }
        Variant::TeacherOnly => max_filter_iterations = 0,
        Variant::SelfNoPredEma => plain_filter(&mut mode, &mut alpha),
        Variant::SelfFull => {}
        Variant::DeleteRemoved => pool = UnsupervisedPool::ActiveOnly,
        Variant::PushAway => {
            loss.enabled = vec![LossTerm::Supervised, LossTerm::PushAway];
            decay = 0.0;
            plain_filter(&mut mode, &mut alpha);
        }
        Variant::EntropyAll | Variant::EntropyUnlabeled => {
            loss.enabled = vec![
                LossTerm::Supervised,
                LossTerm::EntropyMin,
                LossTerm::MeanEntropyMax,
            ];
            loss.entropy_scope = if cfg.variant == Variant::EntropyAll {
                EntropyScope::All
            } else {
                EntropyScope::RemovedOnly
            };
            decay = 0.0;
            plain_filter(&mut mode, &mut alpha);
        }
    }

    let semi = loss.has_unsupervised_terms();
    let plan = if semi {
        BatchPlan::new(cfg.batch.total, cfg.batch.labeled)?
    } else {
        BatchPlan::supervised_only(cfg.batch.total)?
    };
    let optimizer = OptimizerConfig {
        lr: if semi {
            cfg.optimizer.lr
        } else {
            cfg.optimizer.supervised_lr
        },
        momentum: cfg.optimizer.momentum,
        weight_decay: cfg.optimizer.weight_decay,
    };
    Ok(Resolved {
        train: TrainConfig {
            optimizer,
            loss,
            plan,
            teacher_decay: decay,
            unsupervised_pool: pool,
            accumulation: mode.accumulation,
            batch_seed: batch_seed(cfg.seeds.init),
            input_noise_std: cfg.teacher.input_noise_std,
        },
        loop_cfg: LoopConfig {
            filter: mode,
            early_stop: cfg.early_stop,
            max_filter_iterations,
            warm_start: cfg.filter.warm_start,
            reset_ensemble: cfg.filter.reset_ensemble,
        },
        alpha,
    })
}

/// Batch order is tied to the init seed so the three seeds stay independent.
fn batch_seed(init: u64) -> u64 {
    init ^ 0x5EED_BA7C_0000_0000
}
