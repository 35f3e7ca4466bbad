#![allow(dead_code)]

pub mod blobs;
pub mod scripted;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use self_ensemble::losses::{
    evaluate_batch, BatchTargets, ConsistencyKind, EntropyScope, LossConfig, LossTerm,
};
use self_ensemble::ndnum::{
    backward_cached, forward_cached, mlp_forward, softmax_rows, MlpParams, Tensor2,
};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// One randomly drawn gradient-check problem.
pub struct GradCase {
    pub name: String,
    pub student: MlpParams,
    pub teacher: MlpParams,
    pub x: Tensor2,
    pub teacher_x: Tensor2,
    pub cfg: LossConfig,
    pub epoch: usize,
    pub targets: BatchTargets,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// He-initialised weights with every entry, biases included, nudged off
/// zero so no ReLU sits exactly on its kink.
fn generic_params(sizes: &[usize], rng: &mut ChaCha8Rng) -> MlpParams {
    let mut p = MlpParams::init_he(sizes, rng.random()).unwrap();
    p.values_mut()
        .iter_mut()
        .for_each(|v| *v += rng.random_range(-0.2..0.2));
    p
}

fn config_for(term: LossTerm, rng: &mut ChaCha8Rng) -> LossConfig {
    LossConfig {
        consistency_weight: rng.random_range(0.5..5.0),
        consistency_kind: if rng.random_bool(0.5) {
            ConsistencyKind::Mse
        } else {
            ConsistencyKind::Kl
        },
        logit_distance_weight: rng.random_range(0.1..2.0),
        rampup_epochs: 4,
        entropy_min_weight: rng.random_range(0.1..2.0),
        mean_entropy_max_weight: rng.random_range(0.1..2.0),
        push_away_weight: rng.random_range(0.1..2.0),
        entropy_scope: if rng.random_bool(0.5) {
            EntropyScope::All
        } else {
            EntropyScope::RemovedOnly
        },
        enabled: vec![term],
    }
}

/// Single-term cases cycling through every loss term, plus mixed ones.
pub fn grad_cases(count: usize, seed: u64) -> Vec<GradCase> {
    let terms = [
        LossTerm::Supervised,
        LossTerm::Consistency,
        LossTerm::LogitDistance,
        LossTerm::EntropyMin,
        LossTerm::MeanEntropyMax,
        LossTerm::PushAway,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let dim = rng.random_range(2..6);
            let classes = rng.random_range(2..6);
            let mut sizes = vec![dim];
            for _ in 0..rng.random_range(0..3) {
                sizes.push(rng.random_range(2..7));
            }
            sizes.push(classes);
            let rows = rng.random_range(2..9);
            let mut cfg = if i < 2 * terms.len() {
                config_for(terms[i % terms.len()], &mut rng)
            } else {
                let mut c = config_for(LossTerm::Supervised, &mut rng);
                c.enabled = terms
                    .iter()
                    .copied()
                    .filter(|_| rng.random_bool(0.6))
                    .collect();
                if c.enabled.is_empty() {
                    c.enabled.push(LossTerm::Consistency);
                }
                c
            };
            cfg.rampup_epochs = 4;
            let labeled = rng.random_range(1..=rows);
            let mut targets = BatchTargets::default();
            for r in 0..rows {
                let removed = r >= labeled && rng.random_bool(0.5);
                targets
                    .supervised
                    .push((r < labeled).then(|| rng.random_range(0..classes)));
                targets
                    .push_away
                    .push(removed.then(|| rng.random_range(0..classes)));
                targets.entropy_rows.push(match cfg.entropy_scope {
                    EntropyScope::All => true,
                    EntropyScope::RemovedOnly => removed,
                });
            }
            let x = random_tensor(&mut rng, rows, dim);
            let teacher_x = random_tensor(&mut rng, rows, dim);
            GradCase {
                name: format!("case {i}: sizes {sizes:?}, rows {rows}, terms {:?}", cfg.enabled),
                student: generic_params(&sizes, &mut rng),
                teacher: generic_params(&sizes, &mut rng),
                x,
                teacher_x,
                epoch: rng.random_range(0..6),
                cfg,
                targets,
            }
        })
        .collect()
}

impl GradCase {
    fn loss(&self, student: &MlpParams) -> f64 {
        let logits = mlp_forward(student, &self.x).unwrap();
        let probs = softmax_rows(&logits);
        let t_logits = mlp_forward(&self.teacher, &self.teacher_x).unwrap();
        let t_probs = softmax_rows(&t_logits);
        evaluate_batch(
            &self.cfg,
            self.epoch,
            &logits,
            &probs,
            Some((&t_logits, &t_probs)),
            &self.targets,
        )
        .unwrap()
        .breakdown
        .total
    }

    pub fn analytic(&self) -> Vec<f64> {
        let cache = forward_cached(&self.student, &self.x).unwrap();
        let probs = softmax_rows(cache.logits());
        let t_logits = mlp_forward(&self.teacher, &self.teacher_x).unwrap();
        let t_probs = softmax_rows(&t_logits);
        let eval = evaluate_batch(
            &self.cfg,
            self.epoch,
            cache.logits(),
            &probs,
            Some((&t_logits, &t_probs)),
            &self.targets,
        )
        .unwrap();
        backward_cached(&self.student, &cache, &eval.logit_grad)
            .unwrap()
            .values()
            .to_vec()
    }

    pub fn numeric(&self) -> Vec<f64> {
        let mut p = self.student.clone();
        (0..p.values().len())
            .map(|i| {
                let orig = p.values()[i];
                p.values_mut()[i] = orig + FD_EPS;
                let up = self.loss(&p);
                p.values_mut()[i] = orig - FD_EPS;
                let down = self.loss(&p);
                p.values_mut()[i] = orig;
                (up - down) / (2.0 * FD_EPS)
            })
            .collect()
    }

    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub fn relative_error(&self) -> f64 {
        let a = self.analytic();
        let n = self.numeric();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
        let scale = norm(&a).max(norm(&n));
        if scale < 1e-12 {
            norm(&diff)
        } else {
            norm(&diff) / scale
        }
    }
}
