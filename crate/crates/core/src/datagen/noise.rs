use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelRecord, LabelStatus};
use crate::error::{Error, Result};

/// How many samples get flipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Exactly `round(p * n)` flips (per source class for asymmetric noise).
    #[default]
    Exact,
    /// Independent Bernoulli(p) draw per sample.
    Iid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// Flip to one of the other `K - 1` classes, uniformly.
    Symmetric,
    /// Flip each listed source class to its designated target.
    PairFlip { pairs: Vec<[usize; 2]> },
    /// Flip class `i` to `(i + 1) % K`.
    NextClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl NoiseSpec {
    pub fn symmetric(ratio: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            ratio,
            seed,
            sampling: Sampling::Exact,
        }
    }

    pub fn none() -> Self {
        Self::symmetric(0.0, 0)
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidSpec(format!(
                "noise ratio {} outside [0, 1]",
                self.ratio
            )));
        }
        if class_count < 2 {
            return Err(Error::InvalidSpec(format!(
                "noise needs at least 2 classes, got {class_count}"
            )));
        }
        if let NoiseKind::PairFlip { pairs } = &self.kind {
            pair_map(pairs, class_count)?;
        }
        Ok(())
    }
}

/// Semantic flips over the usual CIFAR-10 class order
/// (airplane, automobile, bird, cat, deer, dog, frog, horse, ship, truck):
/// truck -> automobile, bird -> airplane, deer -> horse, cat <-> dog.
pub fn cifar10_pair_map() -> Vec<[usize; 2]> {
    vec![[9, 1], [2, 0], [4, 7], [3, 5], [5, 3]]
}

fn pair_map(pairs: &[[usize; 2]], class_count: usize) -> Result<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    for &[from, to] in pairs {
        if from >= class_count || to >= class_count {
            return Err(Error::InvalidSpec(format!(
                "flip {from} -> {to} leaves [0, {class_count})"
            )));
        }
        if from == to {
            return Err(Error::InvalidSpec(format!("flip {from} -> {to} is a no-op")));
        }
        if map.insert(from, to).is_some() {
            return Err(Error::InvalidSpec(format!(
                "class {from} has more than one flip target"
            )));
        }
    }
    Ok(map)
}

fn check_labels(labels: &[usize], class_count: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= class_count) {
        Some(y) => Err(Error::InvalidSpec(format!(
            "label {y} outside [0, {class_count})"
        ))),
        None => Ok(()),
    }
}

/// Picks which of `n` candidates flip.
fn flip_mask(n: usize, ratio: f64, sampling: Sampling, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; n];
    match sampling {
        Sampling::Exact => {
            let count = ((ratio * n as f64).round() as usize).min(n);
            for i in index::sample(rng, n, count) {
                mask[i] = true;
            }
        }
        Sampling::Iid => mask.iter_mut().for_each(|m| *m = rng.random_bool(ratio)),
    }
    mask
}

fn records(true_labels: &[usize], noisy: Vec<usize>) -> Vec<LabelRecord> {
    true_labels
        .iter()
        .zip(noisy)
        .enumerate()
        .map(|(i, (&t, o))| LabelRecord {
            sample_id: i,
            original_label: o,
            true_label: t,
            status: LabelStatus::Active,
        })
        .collect()
}

/// Uniform noise with an exact flip count; flipped labels never equal the
/// true label.
pub fn inject_symmetric(
    labels: &[usize],
    ratio: f64,
    class_count: usize,
    seed: u64,
) -> Result<Vec<LabelRecord>> {
    inject_noise(labels, &NoiseSpec::symmetric(ratio, seed), class_count)
}

/// Pair-map or next-class noise.
pub fn inject_asymmetric(
    labels: &[usize],
    spec: &NoiseSpec,
    class_count: usize,
) -> Result<Vec<LabelRecord>> {
    if spec.kind == NoiseKind::Symmetric {
        return Err(Error::InvalidSpec(
            "asymmetric injection needs a pair map or next-class noise".into(),
        ));
    }
    inject_noise(labels, spec, class_count)
}

pub fn inject_noise(
    labels: &[usize],
    spec: &NoiseSpec,
    class_count: usize,
) -> Result<Vec<LabelRecord>> {
    spec.validate(class_count)?;
    check_labels(labels, class_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noisy = labels.to_vec();

    match &spec.kind {
        NoiseKind::Symmetric => {
            let mask = flip_mask(labels.len(), spec.ratio, spec.sampling, &mut rng);
            for (y, flip) in noisy.iter_mut().zip(mask) {
                if flip {
                    let other = rng.random_range(0..class_count - 1);
                    *y = if other >= *y { other + 1 } else { other };
                }
            }
        }
        NoiseKind::PairFlip { pairs } => {
            let map = pair_map(pairs, class_count)?;
            flip_by_class(labels, &mut noisy, spec, &mut rng, |c| map.get(&c).copied());
        }
        NoiseKind::NextClass => {
            flip_by_class(labels, &mut noisy, spec, &mut rng, |c| {
                Some((c + 1) % class_count)
            });
        }
    }
    Ok(records(labels, noisy))
}

fn flip_by_class(
    labels: &[usize],
    noisy: &mut [usize],
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
    target: impl Fn(usize) -> Option<usize>,
) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    for (class, members) in by_class {
        let Some(to) = target(class) else { continue };
        let mask = flip_mask(members.len(), spec.ratio, spec.sampling, rng);
        for (&i, flip) in members.iter().zip(mask) {
            if flip {
                noisy[i] = to;
            }
        }
    }
}
