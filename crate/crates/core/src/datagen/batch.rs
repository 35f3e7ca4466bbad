use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split of each mini-batch into labeled and unlabeled slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub total: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
}

impl BatchPlan {
    pub fn new(total: usize, labeled_per_batch: usize) -> Result<Self> {
        if total == 0 || labeled_per_batch == 0 || labeled_per_batch > total {
            return Err(Error::Config(format!(
                "batch plan needs 0 < labeled ({labeled_per_batch}) <= total ({total})"
            )));
        }
        Ok(Self {
            total,
            labeled_per_batch,
            unlabeled_per_batch: total - labeled_per_batch,
        })
    }

    /// Every slot carries a labeled sample.
    pub fn supervised_only(total: usize) -> Result<Self> {
        Self::new(total, total)
    }

    pub fn is_supervised_only(&self) -> bool {
        self.unlabeled_per_batch == 0
    }
}

/// Sample indices of one mini-batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Cycles through a pool, reshuffling at the start of every pass.
struct Reshuffler<'a> {
    pool: Vec<usize>,
    pos: usize,
    rng: &'a mut ChaCha8Rng,
}

impl Iterator for Reshuffler<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.pos == self.pool.len() {
            self.pool.shuffle(self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.pool[self.pos - 1])
    }
}

/// One epoch of mini-batches.
///
/// With unlabeled slots, an epoch is one shuffled pass over `unsupervised`
/// and the labeled slots draw from `active`, reshuffling whenever it runs
/// out. Without unlabeled slots an epoch is one shuffled pass over `active`.
/// The last batch of a pass may be short.
pub fn compose_batch(
    active: &[usize],
    unsupervised: &[usize],
    plan: &BatchPlan,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if active.is_empty() {
        return Err(Error::DegenerateBatch(
            "no active labels left for the supervised slots".into(),
        ));
    }
    let mut rng = epoch_rng(seed, epoch);

    if plan.is_supervised_only() {
        let mut order = active.to_vec();
        order.shuffle(&mut rng);
        return Ok(order
            .chunks(plan.labeled_per_batch)
            .map(|c| Batch {
                labeled: c.to_vec(),
                unlabeled: Vec::new(),
            })
            .collect());
    }

    if unsupervised.is_empty() {
        return Err(Error::DegenerateBatch(
            "plan has unlabeled slots but the unsupervised stream is empty".into(),
        ));
    }
    let mut stream = unsupervised.to_vec();
    stream.shuffle(&mut rng);
    let chunks: Vec<Vec<usize>> = stream
        .chunks(plan.unlabeled_per_batch)
        .map(<[usize]>::to_vec)
        .collect();

    let mut pool = active.to_vec();
    pool.shuffle(&mut rng);
    let mut labeled = Reshuffler {
        pool,
        pos: 0,
        rng: &mut rng,
    };
    Ok(chunks
        .into_iter()
        .map(|unlabeled| Batch {
            labeled: labeled.by_ref().take(plan.labeled_per_batch).collect(),
            unlabeled,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_arithmetic() {
        let plan = BatchPlan::new(8, 4).unwrap();
        let active: Vec<usize> = (0..8).collect();
        let batches = compose_batch(&active, &active, &plan, 1, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches
            .iter()
            .all(|b| b.labeled.len() == 4 && b.unlabeled.len() == 4));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.unlabeled.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, active);
    }

    #[test]
    fn small_active_set_is_resampled() {
        let plan = BatchPlan::new(8, 4).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let batches = compose_batch(&[3, 6], &all, &plan, 5, 2).unwrap();
        for pair in batches.chunks(2) {
            let drawn: Vec<usize> = pair.iter().flat_map(|b| b.labeled.clone()).collect();
            assert_eq!(drawn.len(), 8);
            assert!(drawn.contains(&3) && drawn.contains(&6));
            assert!(drawn.iter().all(|i| *i == 3 || *i == 6));
        }
    }

    #[test]
    fn supervised_only_plan_passes_over_active() {
        let plan = BatchPlan::supervised_only(4).unwrap();
        let active = [1, 2, 5, 7, 9, 11];
        let batches = compose_batch(&active, &[0, 1, 2, 3], &plan, 0, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.unlabeled.is_empty()));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.labeled.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, active);
    }

    #[test]
    fn empty_active_set_is_degenerate() {
        let plan = BatchPlan::new(4, 2).unwrap();
        assert!(matches!(
            compose_batch(&[], &[1, 2], &plan, 0, 0),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let plan = BatchPlan::new(6, 2).unwrap();
        let all: Vec<usize> = (0..40).collect();
        let a = compose_batch(&all, &all, &plan, 9, 0).unwrap();
        let b = compose_batch(&all, &all, &plan, 9, 0).unwrap();
        let c = compose_batch(&all, &all, &plan, 9, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_plans() {
        assert!(BatchPlan::new(4, 5).is_err());
        assert!(BatchPlan::new(0, 0).is_err());
    }
}
