//! Datasets with hidden ground truth, label-noise injection, synthetic
//! blobs, file loaders and labeled/unlabeled batch composition.

mod batch;
mod blobs;
mod io;
mod noise;

use serde::{Deserialize, Serialize};

pub use batch::{compose_batch, Batch, BatchPlan};
pub use blobs::make_blobs;
pub use io::{load_csv, load_idx, write_csv};
pub use noise::{
    cifar10_pair_map, inject_asymmetric, inject_noise, inject_symmetric, NoiseKind, NoiseSpec,
    Sampling,
};

use crate::error::{Error, Result};
use crate::ndnum::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStatus {
    Active,
    /// The label is withheld from supervision; the sample stays in the
    /// unsupervised stream.
    Removed,
}

/// One sample's labels. `original_label` is the (possibly noisy) label handed
/// to training and never changes after injection; `true_label` is only read
/// for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub sample_id: usize,
    pub original_label: usize,
    pub true_label: usize,
    pub status: LabelStatus,
}

impl LabelRecord {
    pub fn clean(sample_id: usize, label: usize) -> Self {
        Self {
            sample_id,
            original_label: label,
            true_label: label,
            status: LabelStatus::Active,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == LabelStatus::Active
    }

    pub fn is_noisy(&self) -> bool {
        self.original_label != self.true_label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor2,
    pub labels: Vec<LabelRecord>,
    pub class_count: usize,
}

impl Dataset {
    /// Dataset whose given labels are taken as ground truth.
    pub fn clean(features: Tensor2, labels: &[usize], class_count: usize) -> Result<Self> {
        let records = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| LabelRecord::clean(i, y))
            .collect();
        Self::new(features, records, class_count)
    }

    pub fn new(features: Tensor2, labels: Vec<LabelRecord>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} label records",
                features.rows(),
                labels.len()
            )));
        }
        for (i, r) in labels.iter().enumerate() {
            if r.sample_id != i {
                return Err(Error::Shape(format!(
                    "record {i} carries sample_id {}",
                    r.sample_id
                )));
            }
            if r.original_label >= class_count || r.true_label >= class_count {
                return Err(Error::InvalidSpec(format!(
                    "sample {i} has a label outside [0, {class_count})"
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.indices_where(|r| r.is_active())
    }

    pub fn removed_indices(&self) -> Vec<usize> {
        self.indices_where(|r| !r.is_active())
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    fn indices_where(&self, pred: impl Fn(&LabelRecord) -> bool) -> Vec<usize> {
        self.labels
            .iter()
            .filter(|r| pred(r))
            .map(|r| r.sample_id)
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.labels.iter().filter(|r| r.is_active()).count()
    }

    pub fn original_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|r| r.original_label).collect()
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|r| r.true_label).collect()
    }

    /// Copy holding the listed samples, renumbered from zero.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.gather_rows(indices)?;
        let labels = indices
            .iter()
            .enumerate()
            .map(|(new_id, &i)| LabelRecord {
                sample_id: new_id,
                ..self.labels[i]
            })
            .collect();
        Ok(Self {
            features,
            labels,
            class_count: self.class_count,
        })
    }

    /// Replaces the label records with the outcome of a noise injection.
    pub fn with_labels(mut self, labels: Vec<LabelRecord>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} replacement records for {} samples",
                labels.len(),
                self.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Fraction of samples whose given label disagrees with the truth.
    pub fn noise_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|r| r.is_noisy()).count() as f64 / self.len() as f64
    }
}
