//! Optimizers over [`ParamSet`]s.

use super::params::ParamSet;
use crate::error::Result;

/// SGD with classic momentum and coupled L2 weight decay:
/// v <- m*v + (g + wd*theta); theta <- theta - lr*v.
pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    velocity: ParamSet,
}

impl SgdMomentum {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        for ((_, v), ((_, p), (_, g))) in self
            .velocity
            .iter_mut()
            .zip(params.iter_mut().zip(grads.iter()))
        {
            ndarray::Zip::from(v)
                .and(p)
                .and(g)
                .for_each(|vel, theta, &grad| {
                    *vel = self.momentum * *vel + grad + self.weight_decay * *theta;
                    *theta -= lr * *vel;
                });
        }
        Ok(())
    }
}

/// Cosine learning-rate schedule from `peak` down to zero over `total` steps.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = (step as f64 / total as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cosine schedule with a short linear warmup; stabilizes momentum-SGD on
/// freshly initialized networks.
pub fn warmup_cosine_lr(peak: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(peak, step.saturating_sub(warmup), total.saturating_sub(warmup))
}

/// Adam with bias correction; used for the diffusion model, probes and SAEs.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((_, m), (_, v)), ((_, p), (_, g))) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(params.iter_mut().zip(grads.iter()))
        {
            ndarray::Zip::from(m)
                .and(v)
                .and(p)
                .and(g)
                .for_each(|m1, v2, theta, &grad| {
                    *m1 = self.beta1 * *m1 + (1.0 - self.beta1) * grad;
                    *v2 = self.beta2 * *v2 + (1.0 - self.beta2) * grad * grad;
                    let mhat = *m1 / bc1;
                    let vhat = *v2 / bc2;
                    *theta -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}
