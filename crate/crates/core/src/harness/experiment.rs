use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataSpec, ExperimentConfig, ValidationMode};
use super::variant::resolve;
use super::Variant;
use crate::datagen::{inject_noise, load_csv, load_idx, make_blobs, Dataset};
use crate::ensemble::PredictionEnsemble;
use crate::error::{Error, Result};
use crate::losses::LossTerm;
use crate::ndnum::MlpParams;
use crate::selfloop::{
    accuracy, precision_recall, self_run, Accumulation, Checkpointer, EpochRecord,
    IterationResult, MeanTeacherTrainer, UnsupervisedPool,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed offset for the validation split's own noise draw.
const VAL_NOISE_OFFSET: u64 = 0x7A11_DA7E;

/// Train, validation and test splits of one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    /// Always carries clean labels.
    pub test: Dataset,
}

/// Builds the splits and applies label noise to train and validation.
pub fn build_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    rng.set_stream(1);
    let (pool, train_ids, val_ids, test_ids) = match &cfg.data {
        DataSpec::Blobs {
            classes,
            per_class,
            dim,
            spread,
            val_per_class,
            test_per_class,
        } => {
            let m = per_class + val_per_class + test_per_class;
            let pool = make_blobs(*classes, m, *dim, *spread, cfg.seeds.data)?;
            let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
            for c in 0..*classes {
                let mut ids: Vec<usize> = (0..pool.len())
                    .filter(|&i| pool.labels[i].true_label == c)
                    .collect();
                ids.shuffle(&mut rng);
                te.extend_from_slice(&ids[..*test_per_class]);
                va.extend_from_slice(&ids[*test_per_class..test_per_class + val_per_class]);
                tr.extend_from_slice(&ids[test_per_class + val_per_class..]);
            }
            (pool, tr, va, te)
        }
        DataSpec::Idx {
            images,
            labels,
            val,
            test,
            train_limit,
        } => carve(load_idx(images, labels)?, *val, *test, *train_limit, &mut rng)?,
        DataSpec::Csv {
            path,
            val,
            test,
            train_limit,
        } => carve(load_csv(path)?, *val, *test, *train_limit, &mut rng)?,
    };
    let mut val_ids = val_ids;
    if let ValidationMode::CleanSubset { n } = cfg.validation {
        if n > val_ids.len() {
            return Err(Error::Config(format!(
                "validation.n = {n} exceeds the {} validation samples",
                val_ids.len()
            )));
        }
        val_ids.shuffle(&mut rng);
        val_ids.truncate(n);
    }
    let sorted = |mut v: Vec<usize>| {
        v.sort_unstable();
        v
    };
    let train = pool.subset(&sorted(train_ids))?;
    let val = pool.subset(&sorted(val_ids))?;
    let test = pool.subset(&sorted(test_ids))?;
    let k = pool.class_count;

    let spec = cfg.noise.spec(cfg.seeds.noise);
    let noisy = inject_noise(&train.true_labels(), &spec, k)?;
    let train = train.with_labels(noisy)?;

    let val = match cfg.validation {
        ValidationMode::Noisy => {
            let spec = cfg
                .noise
                .spec(cfg.seeds.noise.wrapping_add(VAL_NOISE_OFFSET));
            let noisy = inject_noise(&val.true_labels(), &spec, k)?;
            val.with_labels(noisy)?
        }
        ValidationMode::CleanSubset { .. } => val,
    };
    Ok(Splits { train, val, test })
}

type Carved = (Dataset, Vec<usize>, Vec<usize>, Vec<usize>);

fn carve(
    pool: Dataset,
    val: usize,
    test: usize,
    limit: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Carved> {
    if val + test >= pool.len() {
        return Err(Error::Config(format!(
            "data: val {val} + test {test} leaves no training samples out of {}",
            pool.len()
        )));
    }
    let mut ids = pool.all_indices();
    ids.shuffle(rng);
    let te = ids[..test].to_vec();
    let va = ids[test..test + val].to_vec();
    let mut tr = ids[test + val..].to_vec();
    if let Some(limit) = limit {
        tr.truncate(limit);
    }
    Ok((pool, tr, va, te))
}

/// Engine settings a variant actually ran with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEcho {
    pub lr: f64,
    pub teacher_decay: f64,
    pub alpha: f64,
    pub loss_terms: Vec<LossTerm>,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub accumulation: Accumulation,
    pub max_filter_iterations: usize,
    pub unsupervised_pool: UnsupervisedPool,
}

/// One filter iteration without the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub active_count_before: usize,
    pub active_count_after: usize,
    pub filter_precision: f64,
    pub filter_recall: f64,
}

impl From<&IterationResult> for IterationSummary {
    fn from(r: &IterationResult) -> Self {
        Self {
            iteration: r.iteration,
            best_val_acc: r.best_val_acc,
            best_epoch: r.best_epoch,
            epochs_run: r.epochs_run,
            active_count_before: r.active_count_before,
            active_count_after: r.active_count_after,
            filter_precision: r.filter_precision,
            filter_recall: r.filter_recall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub variant: Variant,
    pub config: ExperimentConfig,
    pub resolved: ResolvedEcho,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub train_noise_rate: f64,
    pub val_noise_rate: f64,
    pub iterations: Vec<IterationSummary>,
    pub curves: Vec<EpochRecord>,
    pub best_iteration: Option<usize>,
    /// Clean test accuracy of the returned teacher.
    pub final_test_acc: Option<f64>,
    /// Active set when the loop ended. The set the returned teacher was
    /// trained on is described by its entry in `iterations`.
    pub final_active_count: Option<usize>,
    pub final_precision: Option<f64>,
    pub final_recall: Option<f64>,
    pub epochs_used: usize,
    pub clamp_count: usize,
    pub tie_count: usize,
    /// Diagnostic of a numerical abort; curves then stop where it happened.
    pub abort: Option<String>,
    /// Excluded from any determinism comparison.
    pub wall_time_secs: f64,
}

impl RunReport {
    /// The report with its wall time zeroed, for comparisons.
    pub fn without_wall_time(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Runs one experiment end to end and returns its report.
///
/// A numerical abort is not an error here: it comes back as a report with
/// `abort` set and the curves recorded up to that point.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    let splits = build_splits(cfg)?;
    let resolved = resolve(cfg)?;
    let k = splits.train.class_count;

    let mut sizes = vec![splits.train.dim()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(k);
    let init = MlpParams::init_he(&sizes, cfg.seeds.init)?;

    let echo = ResolvedEcho {
        lr: resolved.train.optimizer.lr,
        teacher_decay: resolved.train.teacher_decay,
        alpha: resolved.alpha,
        loss_terms: resolved.train.loss.enabled.clone(),
        labeled_per_batch: resolved.train.plan.labeled_per_batch,
        unlabeled_per_batch: resolved.train.plan.unlabeled_per_batch,
        accumulation: resolved.loop_cfg.filter.accumulation,
        max_filter_iterations: resolved.loop_cfg.max_filter_iterations,
        unsupervised_pool: resolved.train.unsupervised_pool,
    };
    let checkpoint = match &cfg.checkpoint_dir {
        Some(dir) => Some(Checkpointer::open(dir, &cfg.to_toml()?)?),
        None => None,
    };

    let mut trainer = MeanTeacherTrainer::new(resolved.train.clone(), init, &splits.val)?
        .with_monitor(&splits.test);
    let mut ens = PredictionEnsemble::new(splits.train.len(), k, resolved.alpha)?;
    let outcome = self_run(
        &mut trainer,
        &splits.train,
        &mut ens,
        &resolved.loop_cfg,
        checkpoint.as_ref(),
    );

    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        variant: cfg.variant,
        config: cfg.clone(),
        resolved: echo,
        train_size: splits.train.len(),
        val_size: splits.val.len(),
        test_size: splits.test.len(),
        train_noise_rate: splits.train.noise_rate(),
        val_noise_rate: splits.val.noise_rate(),
        iterations: Vec::new(),
        curves: Vec::new(),
        best_iteration: None,
        final_test_acc: None,
        final_active_count: None,
        final_precision: None,
        final_recall: None,
        epochs_used: 0,
        clamp_count: 0,
        tie_count: 0,
        abort: None,
        wall_time_secs: 0.0,
    };
    match outcome {
        Ok(out) => {
            let test_acc = accuracy(
                &out.best_teacher,
                &splits.test.features,
                &splits.test.true_labels(),
            )?;
            let (precision, recall) = precision_recall(&out.final_label_set);
            report.iterations = out.iterations.iter().map(IterationSummary::from).collect();
            report.curves = out.epochs;
            report.best_iteration = Some(out.best_iteration);
            report.final_test_acc = Some(test_acc);
            report.final_active_count = Some(out.final_label_set.active_count());
            report.final_precision = Some(precision);
            report.final_recall = Some(recall);
            report.epochs_used = out.epochs_used;
            report.tie_count = out.tie_count;
        }
        Err(Error::Numerical(msg)) => {
            report.curves = std::mem::take(&mut trainer.log);
            report.epochs_used = report.curves.len();
            report.abort = Some(msg);
        }
        Err(e) => return Err(e),
    }
    report.clamp_count = report.curves.iter().map(|e| e.clamped).sum();
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
