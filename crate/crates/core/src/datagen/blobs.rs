use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndnum::Tensor2;

/// Minimum distance between two cluster means, in units of `spread`.
const MIN_SEPARATION: f64 = 6.0;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn place_means(classes: usize, dim: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let min_dist = MIN_SEPARATION * spread;
    // Two N(0, s^2 I_d) points sit about s * sqrt(2d) apart.
    let mut scale = 1.5 * min_dist / (2.0 * dim as f64).sqrt();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut rejected = 0;
    while means.len() < classes {
        let candidate: Vec<f64> = (0..dim).map(|_| scale * normal(rng)).collect();
        let far_enough = means.iter().all(|m| {
            m.iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= min_dist
        });
        if far_enough {
            means.push(candidate);
        } else {
            rejected += 1;
            if rejected % 64 == 0 {
                scale *= 1.25;
            }
        }
    }
    means
}

/// `classes` isotropic Gaussian clusters of `per_class` points each.
///
/// Means are at least `6 * spread` apart. Features are standardised per
/// dimension afterwards. Samples are ordered class by class.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dim == 0 || !(spread > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "blobs need classes >= 2, per_class >= 1, dim >= 1, spread > 0 \
             (got {classes}, {per_class}, {dim}, {spread})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = place_means(classes, dim, spread, &mut rng);

    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| m + spread * normal(&mut rng)));
            labels.push(class);
        }
    }
    standardize(&mut data, dim);
    Dataset::clean(Tensor2::from_vec(n, dim, data)?, &labels, classes)
}

fn standardize(data: &mut [f64], dim: usize) {
    let n = (data.len() / dim) as f64;
    for j in 0..dim {
        let mean = data.iter().skip(j).step_by(dim).sum::<f64>() / n;
        let var = data
            .iter()
            .skip(j)
            .step_by(dim)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        data.iter_mut()
            .skip(j)
            .step_by(dim)
            .for_each(|v| *v = (*v - mean) / sd);
    }
}
