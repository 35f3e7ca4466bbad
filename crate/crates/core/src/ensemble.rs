//! Weight-averaged teacher, per-sample running-average predictions, and the
//! label-agreement test that consumes them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndnum::{MlpParams, Tensor2};

/// Exponential moving average of student weights. Never trained directly.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    params: MlpParams,
    pub decay: f64,
    pub updates_applied: usize,
}

impl TeacherState {
    /// Teacher initialised as a copy of `student`.
    pub fn new(student: &MlpParams, decay: f64) -> Result<Self> {
        Self::from_params(student.clone(), decay)
    }

    pub fn from_params(params: MlpParams, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!(
                "teacher decay must be in [0, 1], got {decay}"
            )));
        }
        Ok(Self {
            params,
            decay,
            updates_applied: 0,
        })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn into_params(self) -> MlpParams {
        self.params
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student`, parameter-wise.
pub fn teacher_ema_update(teacher: &mut TeacherState, student: &MlpParams) -> Result<()> {
    teacher.params.check_shape(student, "teacher update")?;
    let beta = teacher.decay;
    teacher
        .params
        .values_mut()
        .iter_mut()
        .zip(student.values())
        .for_each(|(t, &s)| *t = beta * *t + (1.0 - beta) * s);
    teacher.updates_applied += 1;
    Ok(())
}

/// Running average of class-probability vectors, one row per training
/// sample, starting from zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionEnsemble {
    z_bar: Tensor2,
    pub alpha: f64,
    /// Number of row updates folded in so far.
    pub updates_applied: u64,
}

impl PredictionEnsemble {
    pub fn new(samples: usize, classes: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "ensemble momentum must be in [0, 1], got {alpha}"
            )));
        }
        Ok(Self {
            z_bar: Tensor2::zeros(samples, classes),
            alpha,
            updates_applied: 0,
        })
    }

    pub fn samples(&self) -> usize {
        self.z_bar.rows()
    }

    pub fn classes(&self) -> usize {
        self.z_bar.cols()
    }

    pub fn row(&self, sample_id: usize) -> Result<&[f64]> {
        if sample_id >= self.samples() {
            return Err(Error::Index {
                index: sample_id,
                len: self.samples(),
            });
        }
        Ok(self.z_bar.row(sample_id))
    }

    pub fn scores(&self) -> &Tensor2 {
        &self.z_bar
    }

    /// Zeroes every row and the update counter.
    pub fn reset(&mut self) {
        self.z_bar = Tensor2::zeros(self.samples(), self.classes());
        self.updates_applied = 0;
    }

    /// Folds one prediction per sample (row `i` of `predictions` belongs to
    /// sample `i`).
    pub fn update_all(&mut self, predictions: &Tensor2) -> Result<()> {
        if predictions.rows() != self.samples() || predictions.cols() != self.classes() {
            return Err(Error::Shape(format!(
                "{}x{} predictions for a {}x{} ensemble",
                predictions.rows(),
                predictions.cols(),
                self.samples(),
                self.classes()
            )));
        }
        for (i, row) in predictions.row_iter().enumerate() {
            prediction_ema_update(self, i, row)?;
        }
        Ok(())
    }

    /// Writes the checkpoint: little-endian `u64 N`, `u64 K`, `f64 alpha`,
    /// `u64 updates_applied`, then `N * K` row-major `f64`s.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(&(self.samples() as u64).to_le_bytes())?;
        put(&(self.classes() as u64).to_le_bytes())?;
        put(&self.alpha.to_le_bytes())?;
        put(&self.updates_applied.to_le_bytes())?;
        for v in self.z_bar.as_slice() {
            put(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|b| b.try_into().expect("8-byte slice"))
                .ok_or_else(|| Error::load(path, "truncated ensemble checkpoint"))
        };
        let n = u64::from_le_bytes(word(0)?) as usize;
        let k = u64::from_le_bytes(word(1)?) as usize;
        let alpha = f64::from_le_bytes(word(2)?);
        let updates = u64::from_le_bytes(word(3)?);
        if bytes.len() != 32 + n * k * 8 {
            return Err(Error::load(
                path,
                format!("expected {n}x{k} scores, file has {} bytes", bytes.len()),
            ));
        }
        let values = bytes[32..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut ens = Self::new(n, k, alpha)?;
        ens.z_bar = Tensor2::from_vec(n, k, values)?;
        ens.updates_applied = updates;
        Ok(ens)
    }
}

/// `row <- alpha * row + (1 - alpha) * z_hat` for a single sample.
pub fn prediction_ema_update(
    ens: &mut PredictionEnsemble,
    sample_id: usize,
    z_hat: &[f64],
) -> Result<()> {
    if sample_id >= ens.samples() {
        return Err(Error::Index {
            index: sample_id,
            len: ens.samples(),
        });
    }
    if z_hat.len() != ens.classes() {
        return Err(Error::Shape(format!(
            "prediction has {} classes, ensemble {}",
            z_hat.len(),
            ens.classes()
        )));
    }
    if z_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite prediction for sample {sample_id}"
        )));
    }
    let alpha = ens.alpha;
    ens.z_bar
        .row_mut(sample_id)
        .iter_mut()
        .zip(z_hat)
        .for_each(|(z, &p)| *z = alpha * *z + (1.0 - alpha) * p);
    ens.updates_applied += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FilterStrategy {
    /// Keep a label only if it is the ensemble's top class.
    #[default]
    ArgmaxAgreement,
    /// Keep a label if it is among the ensemble's `k` highest classes.
    TopK { k: usize },
}

impl FilterStrategy {
    pub fn validate(&self, classes: usize) -> Result<()> {
        match *self {
            FilterStrategy::TopK { k } if k == 0 || k > classes => Err(Error::Config(format!(
                "top-k filtering needs k in [1, {classes}], got {k}"
            ))),
            _ => Ok(()),
        }
    }

    fn k(&self) -> usize {
        match *self {
            FilterStrategy::ArgmaxAgreement => 1,
            FilterStrategy::TopK { k } => k,
        }
    }
}

/// Outcome of [`agreement_keep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Agreement {
    pub keep: bool,
    /// The decision fell on an exact tie broken by class index.
    pub tie: bool,
}

/// Rank-based agreement between a sample's given label and its ensemble row.
///
/// The label's rank counts classes scoring strictly higher, plus equal
/// scorers with a lower index. The label is kept iff its rank is below `k`.
pub fn agreement_keep(
    ens: &PredictionEnsemble,
    sample_id: usize,
    original_label: usize,
    strategy: FilterStrategy,
) -> Result<Agreement> {
    let row = ens.row(sample_id)?;
    if original_label >= row.len() {
        return Err(Error::Index {
            index: original_label,
            len: row.len(),
        });
    }
    let score = row[original_label];
    let above = row.iter().filter(|&&v| v > score).count();
    let equal_lower = row[..original_label].iter().filter(|&&v| v == score).count();
    let equal_total = row.iter().filter(|&&v| v == score).count();
    let rank = above + equal_lower;
    let k = strategy.k();
    // A tie matters only when the tied block straddles the cut-off.
    let tie = equal_total > 1 && above < k && above + equal_total > k;
    Ok(Agreement {
        keep: rank < k,
        tie,
    })
}
