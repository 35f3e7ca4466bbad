//! Loss terms and their gradients with respect to the student logits.
//!
//! Every term is a mean over the rows it applies to. Gradient helpers return
//! `dLoss/dlogits` for the student so the result can be handed straight to
//! [`crate::ndnum::backward_cached`]. Teacher outputs are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndnum::Tensor2;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyKind {
    #[default]
    Mse,
    /// `KL(teacher || student)`.
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Supervised,
    Consistency,
    LogitDistance,
    EntropyMin,
    MeanEntropyMax,
    PushAway,
}

impl LossTerm {
    /// Terms that learn from unlabeled rows.
    pub fn is_unsupervised(self) -> bool {
        !matches!(self, LossTerm::Supervised)
    }
}

/// Rows the two entropy terms are computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyScope {
    #[default]
    All,
    RemovedOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub consistency_weight: f64,
    pub consistency_kind: ConsistencyKind,
    pub logit_distance_weight: f64,
    pub rampup_epochs: usize,
    pub entropy_min_weight: f64,
    pub mean_entropy_max_weight: f64,
    /// The push-away constant `c`.
    pub push_away_weight: f64,
    pub entropy_scope: EntropyScope,
    pub enabled: Vec<LossTerm>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            consistency_weight: 100.0,
            consistency_kind: ConsistencyKind::Mse,
            logit_distance_weight: 0.01,
            rampup_epochs: 5,
            entropy_min_weight: 1.0,
            mean_entropy_max_weight: 1.0,
            push_away_weight: 1.0,
            entropy_scope: EntropyScope::All,
            enabled: vec![
                LossTerm::Supervised,
                LossTerm::Consistency,
                LossTerm::LogitDistance,
            ],
        }
    }
}

impl LossConfig {
    pub fn supervised_only() -> Self {
        Self {
            enabled: vec![LossTerm::Supervised],
            ..Self::default()
        }
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        self.enabled.contains(&term)
    }

    /// Whether any enabled term consumes unlabeled rows.
    pub fn has_unsupervised_terms(&self) -> bool {
        self.enabled.iter().any(|t| t.is_unsupervised())
    }

    /// Whether a teacher forward pass is needed per batch.
    pub fn needs_teacher(&self) -> bool {
        self.is_enabled(LossTerm::Consistency) || self.is_enabled(LossTerm::LogitDistance)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("consistency_weight", self.consistency_weight),
            ("logit_distance_weight", self.logit_distance_weight),
            ("entropy_min_weight", self.entropy_min_weight),
            ("mean_entropy_max_weight", self.mean_entropy_max_weight),
            ("push_away_weight", self.push_away_weight),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be >= 0, got {w}")));
            }
        }
        if self.is_enabled(LossTerm::PushAway) && self.push_away_weight == 0.0 {
            return Err(Error::Config("push-away needs c > 0".into()));
        }
        Ok(())
    }

    fn weight(&self, term: LossTerm, epoch: usize) -> f64 {
        match term {
            LossTerm::Supervised => 1.0,
            LossTerm::Consistency => {
                rampup_weight(epoch, self.rampup_epochs, self.consistency_weight)
            }
            LossTerm::LogitDistance => self.logit_distance_weight,
            LossTerm::EntropyMin => self.entropy_min_weight,
            LossTerm::MeanEntropyMax => self.mean_entropy_max_weight,
            LossTerm::PushAway => self.push_away_weight,
        }
    }
}

/// Unweighted values of each term plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub consistency: f64,
    pub logit_distance: f64,
    pub entropy_min: f64,
    pub mean_entropy_max: f64,
    pub push_away: f64,
    pub total: f64,
}

/// Unweighted term values handed to [`total_loss`]; `None` means not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub supervised: Option<f64>,
    pub consistency: Option<f64>,
    pub logit_distance: Option<f64>,
    pub entropy_min: Option<f64>,
    pub mean_entropy_max: Option<f64>,
    pub push_away: Option<f64>,
}

impl LossParts {
    fn get(&self, term: LossTerm) -> Option<f64> {
        match term {
            LossTerm::Supervised => self.supervised,
            LossTerm::Consistency => self.consistency,
            LossTerm::LogitDistance => self.logit_distance,
            LossTerm::EntropyMin => self.entropy_min,
            LossTerm::MeanEntropyMax => self.mean_entropy_max,
            LossTerm::PushAway => self.push_away,
        }
    }

    fn set(&mut self, term: LossTerm, value: f64) {
        let slot = match term {
            LossTerm::Supervised => &mut self.supervised,
            LossTerm::Consistency => &mut self.consistency,
            LossTerm::LogitDistance => &mut self.logit_distance,
            LossTerm::EntropyMin => &mut self.entropy_min,
            LossTerm::MeanEntropyMax => &mut self.mean_entropy_max,
            LossTerm::PushAway => &mut self.push_away,
        };
        *slot = Some(value);
    }
}

/// Sigmoid ramp `target * exp(-5 (1 - min(epoch / rampup, 1))^2)`.
pub fn rampup_weight(epoch: usize, rampup_epochs: usize, target: f64) -> f64 {
    if rampup_epochs == 0 || epoch >= rampup_epochs {
        return target;
    }
    let x = 1.0 - epoch as f64 / rampup_epochs as f64;
    target * (-5.0 * x * x).exp()
}

/// Weighted sum of the enabled terms; consistency is ramped by `epoch`.
pub fn total_loss(cfg: &LossConfig, parts: &LossParts, epoch: usize) -> Result<LossBreakdown> {
    let mut total = 0.0;
    for &term in &cfg.enabled {
        let v = parts
            .get(term)
            .ok_or_else(|| Error::Config(format!("enabled loss term {term:?} was not supplied")))?;
        total += cfg.weight(term, epoch) * v;
    }
    Ok(LossBreakdown {
        supervised: parts.supervised.unwrap_or(0.0),
        consistency: parts.consistency.unwrap_or(0.0),
        logit_distance: parts.logit_distance.unwrap_or(0.0),
        entropy_min: parts.entropy_min.unwrap_or(0.0),
        mean_entropy_max: parts.mean_entropy_max.unwrap_or(0.0),
        push_away: parts.push_away.unwrap_or(0.0),
        total,
    })
}

/// A loss value with the number of probabilities that hit [`PROB_FLOOR`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Nll {
    pub value: f64,
    pub clamped: usize,
    /// No row carried a label; `value` is 0.
    pub empty: bool,
}

fn floored_ln(p: f64, clamped: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *clamped += 1;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

fn check_same_shape(a: &Tensor2, b: &Tensor2, what: &str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn check_labels(probs: &Tensor2, labels: &[Option<usize>]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    if let Some(y) = labels.iter().flatten().find(|&&y| y >= probs.cols()) {
        return Err(Error::Index {
            index: *y,
            len: probs.cols(),
        });
    }
    Ok(())
}

/// Mean of `-ln p[y]` over rows that carry a label.
pub fn supervised_nll(probs: &Tensor2, labels: &[Option<usize>]) -> Result<Nll> {
    check_labels(probs, labels)?;
    let mut out = Nll::default();
    let mut n = 0usize;
    for (row, y) in probs.row_iter().zip(labels) {
        if let Some(y) = *y {
            out.value -= floored_ln(row[y], &mut out.clamped);
            n += 1;
        }
    }
    if n == 0 {
        out.empty = true;
    } else {
        out.value /= n as f64;
    }
    Ok(out)
}

pub fn supervised_nll_grad(probs: &Tensor2, labels: &[Option<usize>]) -> Result<Tensor2> {
    check_labels(probs, labels)?;
    let n = labels.iter().flatten().count();
    let mut grad = Tensor2::zeros(probs.rows(), probs.cols());
    if n == 0 {
        return Ok(grad);
    }
    let scale = 1.0 / n as f64;
    for (i, y) in labels.iter().enumerate() {
        if let Some(y) = *y {
            let g = grad.row_mut(i);
            g.iter_mut()
                .zip(probs.row(i))
                .for_each(|(g, p)| *g = p * scale);
            g[y] -= scale;
        }
    }
    Ok(grad)
}

/// Student/teacher disagreement, averaged over rows.
///
/// `Mse` is `sum_k (s_k - t_k)^2`, `Kl` is `sum_k t_k ln(t_k / s_k)`.
pub fn consistency_loss(
    student_probs: &Tensor2,
    teacher_probs: &Tensor2,
    kind: ConsistencyKind,
) -> Result<f64> {
    check_same_shape(student_probs, teacher_probs, "consistency")?;
    let n = student_probs.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut ignored = 0;
    for (s, t) in student_probs.row_iter().zip(teacher_probs.row_iter()) {
        total += match kind {
            ConsistencyKind::Mse => s.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            ConsistencyKind::Kl => s
                .iter()
                .zip(t)
                .filter(|(_, &tk)| tk > 0.0)
                .map(|(&sk, &tk)| tk * (tk.ln() - floored_ln(sk, &mut ignored)))
                .sum::<f64>(),
        };
    }
    Ok(total / n as f64)
}

pub fn consistency_grad(
    student_probs: &Tensor2,
    teacher_probs: &Tensor2,
    kind: ConsistencyKind,
) -> Result<Tensor2> {
    check_same_shape(student_probs, teacher_probs, "consistency")?;
    let n = student_probs.rows().max(1) as f64;
    let mut grad = Tensor2::zeros(student_probs.rows(), student_probs.cols());
    for i in 0..student_probs.rows() {
        let (s, t) = (student_probs.row(i), teacher_probs.row(i));
        match kind {
            ConsistencyKind::Mse => {
                let dp: Vec<f64> = s.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / n).collect();
                softmax_backward_row(s, &dp, grad.row_mut(i));
            }
            ConsistencyKind::Kl => {
                grad.row_mut(i)
                    .iter_mut()
                    .zip(s.iter().zip(t))
                    .for_each(|(g, (a, b))| *g = (a - b) / n);
            }
        }
    }
    Ok(grad)
}

/// Mean over rows of `(1/K) sum_k (z_student - z_teacher)^2`.
pub fn logit_distance_loss(student_logits: &Tensor2, teacher_logits: &Tensor2) -> Result<f64> {
    check_same_shape(student_logits, teacher_logits, "logit distance")?;
    let (n, k) = (student_logits.rows(), student_logits.cols());
    if n == 0 {
        return Ok(0.0);
    }
    let sq: f64 = student_logits
        .as_slice()
        .iter()
        .zip(teacher_logits.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sq / (n * k) as f64)
}

pub fn logit_distance_grad(student_logits: &Tensor2, teacher_logits: &Tensor2) -> Result<Tensor2> {
    check_same_shape(student_logits, teacher_logits, "logit distance")?;
    let (n, k) = (student_logits.rows(), student_logits.cols());
    let scale = 2.0 / (n.max(1) * k) as f64;
    let data = student_logits
        .as_slice()
        .iter()
        .zip(teacher_logits.as_slice())
        .map(|(a, b)| scale * (a - b))
        .collect();
    Tensor2::from_vec(n, k, data)
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean per-row entropy; pushes predictions toward one-hot.
pub fn entropy_min_loss(probs: &Tensor2) -> f64 {
    let n = probs.rows();
    if n == 0 {
        return 0.0;
    }
    probs.row_iter().map(entropy).sum::<f64>() / n as f64
}

pub fn entropy_min_grad(probs: &Tensor2) -> Tensor2 {
    let n = probs.rows().max(1) as f64;
    let mut grad = Tensor2::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let dp: Vec<f64> = p
            .iter()
            .map(|&v| -(v.max(PROB_FLOOR).ln() + 1.0) / n)
            .collect();
        softmax_backward_row(p, &dp, grad.row_mut(i));
    }
    grad
}

fn mean_row(probs: &Tensor2) -> Vec<f64> {
    let mut mean = vec![0.0; probs.cols()];
    for row in probs.row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, p)| *m += p);
    }
    let n = probs.rows().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Negated entropy of the mean prediction; minimising it balances classes.
pub fn mean_entropy_max_loss(probs: &Tensor2) -> f64 {
    if probs.rows() == 0 {
        return 0.0;
    }
    -entropy(&mean_row(probs))
}

pub fn mean_entropy_max_grad(probs: &Tensor2) -> Tensor2 {
    let n = probs.rows().max(1) as f64;
    let dp: Vec<f64> = mean_row(probs)
        .iter()
        .map(|&m| (m.max(PROB_FLOOR).ln() + 1.0) / n)
        .collect();
    let mut grad = Tensor2::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        softmax_backward_row(probs.row(i), &dp, grad.row_mut(i));
    }
    grad
}

/// Mean over labeled rows of `c/(K-1) * sum_{y' != y} -ln p[y']`.
pub fn push_away_loss(probs: &Tensor2, labels: &[Option<usize>], c: f64) -> Result<Nll> {
    check_labels(probs, labels)?;
    let k = probs.cols();
    if k < 2 {
        return Err(Error::Shape("push-away needs at least two classes".into()));
    }
    let mut out = Nll::default();
    let mut n = 0usize;
    for (row, y) in probs.row_iter().zip(labels) {
        let Some(y) = *y else { continue };
        n += 1;
        let mut s = 0.0;
        for (j, &p) in row.iter().enumerate() {
            if j != y {
                s -= floored_ln(p, &mut out.clamped);
            }
        }
        out.value += c * s / (k - 1) as f64;
    }
    if n == 0 {
        out.empty = true;
    } else {
        out.value /= n as f64;
    }
    Ok(out)
}

pub fn push_away_grad(probs: &Tensor2, labels: &[Option<usize>], c: f64) -> Result<Tensor2> {
    check_labels(probs, labels)?;
    let k = probs.cols();
    let n = labels.iter().flatten().count();
    let mut grad = Tensor2::zeros(probs.rows(), k);
    if n == 0 || k < 2 {
        return Ok(grad);
    }
    let scale = c / ((k - 1) * n) as f64;
    for (i, y) in labels.iter().enumerate() {
        let Some(y) = *y else { continue };
        let g = grad.row_mut(i);
        for (j, (g, &p)) in g.iter_mut().zip(probs.row(i)).enumerate() {
            let others = if j == y { 0.0 } else { 1.0 };
            *g = scale * ((k - 1) as f64 * p - others);
        }
    }
    Ok(grad)
}

/// Chains `dLoss/dp` through a softmax row.
fn softmax_backward_row(p: &[f64], dp: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    out.iter_mut()
        .zip(p.iter().zip(dp))
        .for_each(|(o, (pi, gi))| *o = pi * (gi - dot));
}

/// Per-row targets for one mixed batch.
#[derive(Clone, Debug, Default)]
pub struct BatchTargets {
    /// Label used by the supervised term (labeled slots only).
    pub supervised: Vec<Option<usize>>,
    /// Label pushed away from (removed samples).
    pub push_away: Vec<Option<usize>>,
    /// Rows the entropy terms see.
    pub entropy_rows: Vec<bool>,
}

/// All enabled terms on one batch, with the combined student-logit gradient.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub breakdown: LossBreakdown,
    pub logit_grad: Tensor2,
    pub clamped: usize,
    pub empty_supervised: bool,
}

fn add_scaled(acc: &mut Tensor2, g: &Tensor2, w: f64) {
    acc.as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .for_each(|(a, b)| *a += w * b);
}

fn rows_where(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect()
}

fn scatter_rows(target: &mut Tensor2, rows: &[usize], src: &Tensor2, w: f64) {
    for (r, &i) in rows.iter().enumerate() {
        target
            .row_mut(i)
            .iter_mut()
            .zip(src.row(r))
            .for_each(|(a, b)| *a += w * b);
    }
}

/// Evaluates every enabled term of `cfg` on a batch.
pub fn evaluate_batch(
    cfg: &LossConfig,
    epoch: usize,
    student_logits: &Tensor2,
    student_probs: &Tensor2,
    teacher: Option<(&Tensor2, &Tensor2)>,
    targets: &BatchTargets,
) -> Result<LossEvaluation> {
    let rows = student_logits.rows();
    if targets.supervised.len() != rows
        || targets.push_away.len() != rows
        || targets.entropy_rows.len() != rows
    {
        return Err(Error::Shape(format!(
            "batch targets do not cover {rows} rows"
        )));
    }
    let mut parts = LossParts::default();
    let mut grad = Tensor2::zeros(rows, student_logits.cols());
    let mut clamped = 0;
    let mut empty_supervised = false;

    for &term in &cfg.enabled {
        let w = cfg.weight(term, epoch);
        let value = match term {
            LossTerm::Supervised => {
                let nll = supervised_nll(student_probs, &targets.supervised)?;
                clamped += nll.clamped;
                empty_supervised = nll.empty;
                add_scaled(
                    &mut grad,
                    &supervised_nll_grad(student_probs, &targets.supervised)?,
                    w,
                );
                nll.value
            }
            LossTerm::Consistency | LossTerm::LogitDistance => {
                let (t_logits, t_probs) = teacher.ok_or_else(|| {
                    Error::Config(format!("{term:?} needs teacher outputs"))
                })?;
                if term == LossTerm::Consistency {
                    let kind = cfg.consistency_kind;
                    add_scaled(
                        &mut grad,
                        &consistency_grad(student_probs, t_probs, kind)?,
                        w,
                    );
                    consistency_loss(student_probs, t_probs, kind)?
                } else {
                    add_scaled(&mut grad, &logit_distance_grad(student_logits, t_logits)?, w);
                    logit_distance_loss(student_logits, t_logits)?
                }
            }
            LossTerm::EntropyMin | LossTerm::MeanEntropyMax => {
                let idx = rows_where(&targets.entropy_rows);
                let sub = student_probs.gather_rows(&idx)?;
                if term == LossTerm::EntropyMin {
                    scatter_rows(&mut grad, &idx, &entropy_min_grad(&sub), w);
                    entropy_min_loss(&sub)
                } else {
                    scatter_rows(&mut grad, &idx, &mean_entropy_max_grad(&sub), w);
                    mean_entropy_max_loss(&sub)
                }
            }
            LossTerm::PushAway => {
                // `c` is applied as the term weight.
                let pa = push_away_loss(student_probs, &targets.push_away, 1.0)?;
                clamped += pa.clamped;
                add_scaled(
                    &mut grad,
                    &push_away_grad(student_probs, &targets.push_away, 1.0)?,
                    w,
                );
                pa.value
            }
        };
        parts.set(term, value);
    }

    let breakdown = total_loss(cfg, &parts, epoch)?;
    Ok(LossEvaluation {
        breakdown,
        logit_grad: grad,
        clamped,
        empty_supervised,
    })
}
