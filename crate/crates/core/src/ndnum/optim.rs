use std::f64::consts::PI;

use super::mlp::{Gradients, MlpParams};
use crate::error::{Error, Result};

/// Nesterov SGD state with a single cosine learning-rate cycle.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Gradients,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub step: usize,
    pub total_steps: usize,
}

impl OptimizerState {
    pub fn new(
        params: &MlpParams,
        base_lr: f64,
        weight_decay: f64,
        total_steps: usize,
    ) -> Result<Self> {
        if !(base_lr > 0.0) || !(weight_decay >= 0.0) || total_steps == 0 {
            return Err(Error::Config(format!(
                "optimizer needs base_lr > 0, weight_decay >= 0, total_steps > 0 \
                 (got {base_lr}, {weight_decay}, {total_steps})"
            )));
        }
        Ok(Self {
            velocity: Gradients::zeros_like(params),
            base_lr,
            weight_decay,
            step: 0,
            total_steps,
        })
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }
}

/// `base_lr * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(state: &OptimizerState) -> f64 {
    if state.step >= state.total_steps {
        return 0.0;
    }
    let progress = state.step as f64 / state.total_steps as f64;
    state.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// One Nesterov step:
///
/// ```text
/// g <- g + weight_decay * p      (weights only)
/// v <- momentum * v - lr * g
/// p <- p + momentum * v - lr * g
/// ```
pub fn sgd_nesterov_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    momentum: f64,
) -> Result<()> {
    if !grads.matches(params) || !state.velocity.matches(params) {
        return Err(Error::Shape(format!(
            "gradients {:?} / velocity {:?} do not match parameters {:?}",
            grads.sizes(),
            state.velocity.sizes(),
            params.sizes()
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "momentum must be in [0, 1), got {momentum}"
        )));
    }
    let lr = cosine_lr(state);
    let mut decayed = vec![false; params.values().len()];
    for r in params.weight_ranges() {
        decayed[r].iter_mut().for_each(|d| *d = true);
    }
    let wd = state.weight_decay;
    let velocity = state.velocity.values_mut();
    for (((p, &g), v), &decay) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(velocity.iter_mut())
        .zip(&decayed)
    {
        let g = if decay { g + wd * *p } else { g };
        *v = momentum * *v - lr * g;
        *p += momentum * *v - lr * g;
    }
    state.step = (state.step + 1).min(state.total_steps);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(params: &MlpParams, lr: f64, wd: f64, total: usize) -> OptimizerState {
        OptimizerState::new(params, lr, wd, total).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        let p = MlpParams::zeros(&[1, 1]).unwrap();
        let mut s = state(&p, 0.05, 0.0, 100);
        assert_eq!(cosine_lr(&s), 0.05);
        s.step = 50;
        assert!((cosine_lr(&s) - 0.025).abs() < 1e-15);
        s.step = 100;
        assert_eq!(cosine_lr(&s), 0.0);
    }

    #[test]
    fn cosine_is_non_increasing() {
        let p = MlpParams::zeros(&[1, 1]).unwrap();
        let mut s = state(&p, 0.1, 0.0, 37);
        let mut prev = f64::INFINITY;
        for step in 0..=37 {
            s.step = step;
            let lr = cosine_lr(&s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = MlpParams::init_he(&[2, 2], 5).unwrap();
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        g.values_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 - 2.5);
        let mut s = state(&p, 0.1, 0.0, 1000);
        sgd_nesterov_step(&mut p, &g, &mut s, 0.0).unwrap();
        for ((a, b), gi) in p.values().iter().zip(before.values()).zip(g.values()) {
            assert!((a - (b - 0.1 * gi)).abs() < 1e-15);
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = MlpParams::init_he(&[3, 2], 9).unwrap();
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        let mut s = state(&p, 0.1, 0.0, 10);
        sgd_nesterov_step(&mut p, &g, &mut s, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_step_nesterov_unroll() {
        // one weight, one bias, constant gradient g, momentum mu
        let mut p = MlpParams::zeros(&[1, 1]).unwrap();
        p.values_mut().copy_from_slice(&[1.0, -1.0]);
        let mut g = Gradients::zeros_like(&p);
        g.values_mut().copy_from_slice(&[0.5, 0.5]);
        let (mu, base, total) = (0.9, 0.2, 4usize);
        let mut s = state(&p, base, 0.0, total);
        sgd_nesterov_step(&mut p, &g, &mut s, mu).unwrap();
        sgd_nesterov_step(&mut p, &g, &mut s, mu).unwrap();

        let lr0 = base;
        let lr1 = base * 0.5 * (1.0 + (PI / 4.0).cos());
        let gv = 0.5;
        let v1 = -lr0 * gv;
        let d1 = mu * v1 - lr0 * gv;
        let v2 = mu * v1 - lr1 * gv;
        let d2 = mu * v2 - lr1 * gv;
        assert!((p.values()[0] - (1.0 + d1 + d2)).abs() < 1e-15);
        assert!((p.values()[1] - (-1.0 + d1 + d2)).abs() < 1e-15);
        assert!((s.velocity().values()[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut p = MlpParams::zeros(&[1, 1]).unwrap();
        p.values_mut().copy_from_slice(&[2.0, 2.0]);
        let g = Gradients::zeros_like(&p);
        let mut s = state(&p, 0.1, 0.5, 100);
        sgd_nesterov_step(&mut p, &g, &mut s, 0.0).unwrap();
        assert!((p.values()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(p.values()[1], 2.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = MlpParams::zeros(&[2, 2]).unwrap();
        let other = MlpParams::zeros(&[2, 3]).unwrap();
        let g = Gradients::zeros_like(&other);
        let mut s = state(&p, 0.1, 0.0, 10);
        assert!(matches!(
            sgd_nesterov_step(&mut p, &g, &mut s, 0.9),
            Err(Error::Shape(_))
        ));
        let g = Gradients::zeros_like(&p);
        assert!(sgd_nesterov_step(&mut p, &g, &mut s, 1.0).is_err());
        assert!(OptimizerState::new(&p, 0.0, 0.0, 10).is_err());
        assert!(OptimizerState::new(&p, 0.1, 0.0, 0).is_err());
    }
}
