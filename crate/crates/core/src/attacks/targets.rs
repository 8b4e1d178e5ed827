//! Attack-target adapters.

use ndarray::{Array1, Array2};

use super::{loss_grad_via_logits, AttackTarget, ObjectiveData};
use crate::diffusion::{features_with_grad, DiffusionModel, LinearProbe};
use crate::error::Result;
use crate::nn::Images;
use crate::repr::{Condition, NoiseMode};

/// Two-class linear model with logits (0, sum(w * x)); the closed-form PGD
/// oracle and the frequency-saliency oracle both build on it.
pub struct LinearBinaryTarget {
    weights: Images, // (1, c, h, w)
}

impl LinearBinaryTarget {
    pub fn new(weights: Images) -> Self {
        assert_eq!(weights.dim().0, 1, "one weight image");
        LinearBinaryTarget { weights }
    }

    pub fn weights(&self) -> &Images {
        &self.weights
    }

    fn score(&self, x: &Images) -> Array1<f64> {
        let n = x.dim().0;
        Array1::from_iter((0..n).map(|i| {
            x.slice(ndarray::s![i, .., .., ..])
                .iter()
                .zip(self.weights.slice(ndarray::s![0, .., .., ..]).iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        }))
    }
}

impl AttackTarget for LinearBinaryTarget {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&self, x: &Images, _draw: u64) -> Result<Array2<f64>> {
        let score = self.score(x);
        let mut logits = Array2::<f64>::zeros((x.dim().0, 2));
        for (i, &s) in score.iter().enumerate() {
            logits[[i, 1]] = s;
        }
        Ok(logits)
    }

    fn loss_and_grad(
        &self,
        x: &Images,
        objective: &ObjectiveData<'_>,
        draw: u64,
    ) -> Result<(Array1<f64>, Images)> {
        let logits = self.logits(x, draw)?;
        let (per, g_logits) = loss_grad_via_logits(&logits, objective);
        // d(logit_1)/dx = w; logit_0 is constant.
        let mut gx = Images::zeros(x.dim());
        for i in 0..x.dim().0 {
            let coeff = g_logits[[i, 1]];
            gx.slice_mut(ndarray::s![i, .., .., ..])
                .zip_mut_with(&self.weights.slice(ndarray::s![0, .., .., ..]), |g, &w| {
                    *g = coeff * w
                });
        }
        Ok((per, gx))
    }
}

/// Linear probe on frozen diffusion features; the pipeline is randomized
/// through the extraction noise, identified by the attack draw id.
pub struct DiffusionProbeTarget<'a> {
    pub model: &'a DiffusionModel,
    pub probe: &'a LinearProbe,
    pub sigma: f64,
    pub tap_point: String,
}

impl<'a> DiffusionProbeTarget<'a> {
    pub fn new(model: &'a DiffusionModel, probe: &'a LinearProbe, sigma: f64) -> Self {
        DiffusionProbeTarget {
            model,
            probe,
            sigma,
            tap_point: crate::diffusion::TAP_BOTTLENECK.to_string(),
        }
    }

    fn features(&self, x: &Images, draw: u64) -> Result<Array2<f64>> {
        let (pooled, _) = features_with_grad(
            self.model,
            x,
            self.sigma,
            Condition::Unconditional,
            NoiseMode::Fresh(draw),
            &self.tap_point,
            None,
        )?;
        Ok(pooled)
    }
}

impl AttackTarget for DiffusionProbeTarget<'_> {
    fn num_classes(&self) -> usize {
        self.probe.weight.nrows()
    }

    fn logits(&self, x: &Images, draw: u64) -> Result<Array2<f64>> {
        Ok(self.probe.logits(&self.features(x, draw)?))
    }

    fn loss_and_grad(
        &self,
        x: &Images,
        objective: &ObjectiveData<'_>,
        draw: u64,
    ) -> Result<(Array1<f64>, Images)> {
        // Forward once for logits, backward through probe and encoder.
        let (pooled, _) = features_with_grad(
            self.model,
            x,
            self.sigma,
            Condition::Unconditional,
            NoiseMode::Fresh(draw),
            &self.tap_point,
            None,
        )?;
        let logits = self.probe.logits(&pooled);
        let (per, g_logits) = loss_grad_via_logits(&logits, objective);
        let g_pooled = self.probe.backward_features(&g_logits);
        let (_, back) = features_with_grad(
            self.model,
            x,
            self.sigma,
            Condition::Unconditional,
            NoiseMode::Fresh(draw),
            &self.tap_point,
            Some(&g_pooled),
        )?;
        let (gx, _) = back.expect("gradient requested");
        Ok((per, gx))
    }

    fn randomized(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::eot_gradient;
    use crate::diffusion::{train_linear_probe, NoiseSchedule, UNetConfig};
    use crate::rng::{normal_array, substream, uniform_array};

    #[test]
    fn probe_pipeline_gradients_match_finite_differences() {
        let model = DiffusionModel::init(
            UNetConfig {
                in_channels: 1,
                width: 4,
                num_classes: 2,
                image_size: 8,
            },
            NoiseSchedule::default(),
            3,
        )
        .unwrap();
        let mut rng = substream(50, "probe-target", 0);
        let feats: Array2<f64> = normal_array(&mut rng, (12, 8));
        let labels = Array1::from_iter((0..12).map(|i| i % 2));
        let probe = train_linear_probe(&feats, &labels, 2).unwrap();

        let target = DiffusionProbeTarget::new(&model, &probe, 0.1);
        let x: Images = uniform_array(&mut rng, (2, 1, 8, 8), 0.2, 0.8);
        let y = ndarray::array![0_usize, 1];
        let data = ObjectiveData::CrossEntropy { labels: &y };
        // A fixed draw makes the pipeline deterministic for the check.
        let (_, gx) = target.loss_and_grad(&x, &data, 123).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in ndarray::indices(x.raw_dim()).into_iter().step_by(9) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let lp = target.loss_and_grad(&xp, &data, 123).unwrap().0.sum();
            let lm = target.loss_and_grad(&xm, &data, 123).unwrap().0.sum();
            let num = (lp - lm) / (2.0 * h);
            worst = worst.max((num - gx[idx]).abs() / num.abs().max(gx[idx].abs()).max(1e-8));
        }
        assert!(worst < 1e-4, "rel err {worst}");
    }

    #[test]
    fn eot_variance_shrinks_with_draw_count() {
        // Monte-Carlo variance fit on a randomized pipeline: the variance of
        // the EOT gradient estimate scales like 1/n_draws.
        let model = DiffusionModel::init(
            UNetConfig {
                in_channels: 1,
                width: 4,
                num_classes: 2,
                image_size: 8,
            },
            NoiseSchedule::default(),
            4,
        )
        .unwrap();
        let mut rng = substream(51, "eot-var", 0);
        let feats: Array2<f64> = normal_array(&mut rng, (12, 8));
        let labels = Array1::from_iter((0..12).map(|i| i % 2));
        let probe = train_linear_probe(&feats, &labels, 2).unwrap();
        let target = DiffusionProbeTarget::new(&model, &probe, 0.3);
        let x: Images = uniform_array(&mut rng, (1, 1, 8, 8), 0.2, 0.8);
        let y = ndarray::array![0_usize];

        let variance_at = |n_draws: usize| {
            let trials = 24;
            let mut grads = Vec::with_capacity(trials);
            for t in 0..trials {
                let data = ObjectiveData::CrossEntropy { labels: &y };
                let (_, g) = eot_gradient(&target, &x, &data, n_draws, 1000 + t as u64).unwrap();
                grads.push(g);
            }
            let mut mean = Images::zeros(x.dim());
            for g in &grads {
                mean += g;
            }
            mean.mapv_inplace(|v| v / trials as f64);
            let mut var = 0.0;
            for g in &grads {
                var += (g - &mean).iter().map(|v| v * v).sum::<f64>();
            }
            var / trials as f64
        };

        let v1 = variance_at(1);
        let v8 = variance_at(8);
        // Expect roughly 8x reduction; allow a loose band.
        assert!(
            v8 < v1 / 3.0,
            "variance did not shrink with draws: v1={v1}, v8={v8}"
        );
    }
}
