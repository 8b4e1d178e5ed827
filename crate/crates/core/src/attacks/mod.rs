//! l-infinity projected-gradient adversaries and robust evaluation.
//!
//! Attacks operate on anything implementing [`AttackTarget`]; randomized
//! pipelines (the frozen-diffusion probe) expose their noise through a draw
//! id so the attack loop can run plain single-draw, EOT-averaged, or fully
//! seeded evaluations.

mod targets;

pub use targets::{DiffusionProbeTarget, LinearBinaryTarget};

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::diffusion::probe::argmax_rows;
use crate::error::{Error, Result};
use crate::nn::ops::{cross_entropy, cross_entropy_backward, kl_divergence, kl_divergence_backward, softmax};
use crate::nn::Images;
use crate::rng::{derive_seed, substream, uniform_array};

/// Attack objective: plain cross-entropy or the TRADES-style KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackObjective {
    CrossEntropy,
    KlDivergence,
}

/// PGD configuration; epsilon and alpha are in pixel units on [0,1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub restarts: usize,
    pub objective: AttackObjective,
    pub random_init: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            restarts: 1,
            objective: AttackObjective::CrossEntropy,
            random_init: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::argument("epsilon must lie in [0,1)"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::argument("alpha must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::argument("restarts must be at least 1"));
        }
        Ok(())
    }

    /// Advisory lint: alpha above epsilon wastes steps on the projection.
    pub fn lint(&self) -> Option<String> {
        (self.alpha > self.epsilon && self.epsilon > 0.0)
            .then(|| format!("alpha {} exceeds epsilon {}", self.alpha, self.epsilon))
    }
}

/// How a randomized target's noise is driven during attack and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// One fresh draw per gradient step.
    Plain,
    /// Average gradients over n fresh draws per step.
    Eot(usize),
    /// One fixed draw throughout; the pipeline becomes deterministic.
    SeededNoise(u64),
}

/// Loss data handed to targets: labels for cross-entropy, reference clean
/// probabilities for the KL objective.
pub enum ObjectiveData<'a> {
    CrossEntropy { labels: &'a Array1<usize> },
    Kl { reference: &'a Array2<f64> },
}

/// A differentiable classifier under attack. `draw` identifies the noise
/// realization for randomized pipelines; deterministic models ignore it.
pub trait AttackTarget {
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Images, draw: u64) -> Result<Array2<f64>>;
    /// Per-example losses and the gradient of their *sum* wrt the input.
    fn loss_and_grad(
        &self,
        x: &Images,
        objective: &ObjectiveData<'_>,
        draw: u64,
    ) -> Result<(Array1<f64>, Images)>;
    fn randomized(&self) -> bool {
        false
    }
}

/// Generic implementation of per-example losses + input gradient from logits,
/// for targets that expose a logits-backward hook.
pub fn loss_grad_via_logits(
    logits: &Array2<f64>,
    objective: &ObjectiveData<'_>,
) -> (Array1<f64>, Array2<f64>) {
    match objective {
        ObjectiveData::CrossEntropy { labels } => {
            let lab: Vec<usize> = labels.to_vec();
            let (_, per) = cross_entropy(logits, &lab);
            // cross_entropy_backward is the mean-loss gradient; scale to sum.
            let mut g = cross_entropy_backward(logits, &lab);
            g.mapv_inplace(|v| v * lab.len() as f64);
            (per, g)
        }
        ObjectiveData::Kl { reference } => {
            let (_, per) = kl_divergence(reference, logits);
            let mut g = kl_divergence_backward(reference, logits);
            g.mapv_inplace(|v| v * reference.nrows() as f64);
            (per, g)
        }
    }
}

/// Sign with sign(0) = 0, so exactly-zero gradient coordinates do not move.
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Element-wise projection onto the epsilon-ball around `anchor` intersected
/// with the valid pixel range [0,1].
pub fn project_linf(candidate: &Images, anchor: &Images, epsilon: f64) -> Result<Images> {
    if candidate.dim() != anchor.dim() {
        return Err(Error::argument("projection shapes must match"));
    }
    let mut out = candidate.clone();
    out.zip_mut_with(anchor, |c, &a| {
        *c = c.clamp(a - epsilon, a + epsilon).clamp(0.0, 1.0);
    });
    Ok(out)
}

/// Result of one PGD attack on a batch.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial_images: Images,
    /// True where the final prediction differs from the label.
    pub success_mask: Vec<bool>,
    /// Batch-mean objective value per step of the first restart.
    pub loss_trace: Vec<f64>,
    /// Per-example best (max) objective value across restarts.
    pub final_losses: Array1<f64>,
}

/// Mean input gradient over `n_draws` independent noise draws of a
/// randomized pipeline; for deterministic targets this equals the plain
/// gradient for any count.
pub fn eot_gradient(
    target: &dyn AttackTarget,
    x: &Images,
    objective: &ObjectiveData<'_>,
    n_draws: usize,
    seed: u64,
) -> Result<(Array1<f64>, Images)> {
    if n_draws == 0 {
        return Err(Error::argument("EOT needs at least one draw"));
    }
    let mut mean_loss = Array1::<f64>::zeros(x.dim().0);
    let mut mean_grad = Images::zeros(x.dim());
    for i in 0..n_draws {
        let draw = derive_seed(seed, "eot-draw", i as u64);
        let (loss, grad) = target.loss_and_grad(x, objective, draw)?;
        mean_loss += &loss;
        mean_grad += &grad;
    }
    let inv = 1.0 / n_draws as f64;
    mean_loss.mapv_inplace(|v| v * inv);
    mean_grad.mapv_inplace(|v| v * inv);
    Ok((mean_loss, mean_grad))
}

/// PGD with the plain single-draw noise mode.
pub fn pgd_attack(
    target: &dyn AttackTarget,
    x: &Images,
    labels: &Array1<usize>,
    config: &AttackConfig,
) -> Result<AttackResult> {
    pgd_attack_with_mode(target, x, labels, config, EvalMode::Plain)
}

/// PGD: x^(t+1) = project(x^(t) + alpha * sign(grad)), per-example worst
/// case over restarts, deterministic under a fixed seed.
pub fn pgd_attack_with_mode(
    target: &dyn AttackTarget,
    x: &Images,
    labels: &Array1<usize>,
    config: &AttackConfig,
    mode: EvalMode,
) -> Result<AttackResult> {
    config.validate()?;
    let n = x.dim().0;
    if labels.len() != n {
        return Err(Error::argument("labels must match batch size"));
    }

    // The KL objective maximizes divergence from the clean prediction; the
    // reference distribution is fixed per attack.
    let ref_draw = match mode {
        EvalMode::SeededNoise(s) => s,
        _ => derive_seed(config.seed, "kl-ref", 0),
    };
    let reference = match config.objective {
        AttackObjective::KlDivergence => Some(softmax(&target.logits(x, ref_draw)?)),
        AttackObjective::CrossEntropy => None,
    };
    let objective = |_step: usize| -> ObjectiveData<'_> {
        match &reference {
            Some(r) => ObjectiveData::Kl { reference: r },
            None => ObjectiveData::CrossEntropy { labels },
        }
    };

    let eval_draw = match mode {
        EvalMode::SeededNoise(s) => s,
        _ => derive_seed(config.seed, "final-eval", 0),
    };

    let mut best_adv = x.clone();
    let mut best_loss = Array1::<f64>::from_elem(n, f64::NEG_INFINITY);
    let mut loss_trace = Vec::new();

    for restart in 0..config.restarts {
        let mut rng = substream(config.seed, "pgd-restart", restart as u64);
        let mut adv = if config.random_init && config.epsilon > 0.0 {
            let jitter: Images = uniform_array(&mut rng, x.dim(), -config.epsilon, config.epsilon);
            project_linf(&(x + &jitter), x, config.epsilon)?
        } else {
            x.clone()
        };

        for step in 0..config.steps {
            let draw = match mode {
                EvalMode::SeededNoise(s) => s,
                _ => derive_seed(
                    config.seed,
                    "pgd-draw",
                    (restart * config.steps + step) as u64,
                ),
            };
            let (per_losses, grad) = match mode {
                EvalMode::Eot(k) => eot_gradient(target, &adv, &objective(step), k, draw)?,
                _ => target.loss_and_grad(&adv, &objective(step), draw)?,
            };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    "pgd",
                    format!("non-finite gradient at step {step}"),
                ));
            }
            if restart == 0 {
                loss_trace.push(per_losses.mean().unwrap_or(0.0));
            }
            let stepped = adv.mapv(|_| 0.0) + &adv + &grad.mapv(|g| config.alpha * sign0(g));
            adv = project_linf(&stepped, x, config.epsilon)?;
        }

        let (final_losses, _) = target.loss_and_grad(&adv, &objective(config.steps), eval_draw)?;
        for i in 0..n {
            if final_losses[i] > best_loss[i] {
                best_loss[i] = final_losses[i];
                best_adv
                    .slice_mut(s![i, .., .., ..])
                    .assign(&adv.slice(s![i, .., .., ..]));
            }
        }
    }

    let preds = argmax_rows(&target.logits(&best_adv, eval_draw)?);
    let success_mask = preds
        .iter()
        .zip(labels.iter())
        .map(|(p, y)| p != y)
        .collect();
    Ok(AttackResult {
        adversarial_images: best_adv,
        success_mask,
        loss_trace,
        final_losses: best_loss,
    })
}

/// Clean and robust accuracy of a target on a labeled batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    /// Robust <= clean is expected; a violation is reported, not fatal.
    pub sanity_warning: Option<String>,
}

/// Evaluate clean accuracy and robust accuracy under one attack config.
pub fn evaluate_robust(
    target: &dyn AttackTarget,
    x: &Images,
    labels: &Array1<usize>,
    config: &AttackConfig,
    mode: EvalMode,
) -> Result<EvalReport> {
    evaluate_robust_multi(target, x, labels, std::slice::from_ref(config), mode)
}

/// Worst-case evaluation across several attack configs: an example counts as
/// robust only if it is classified correctly under every attack.
pub fn evaluate_robust_multi(
    target: &dyn AttackTarget,
    x: &Images,
    labels: &Array1<usize>,
    configs: &[AttackConfig],
    mode: EvalMode,
) -> Result<EvalReport> {
    let n = x.dim().0;
    let eval_draw = match mode {
        EvalMode::SeededNoise(s) => s,
        _ => derive_seed(configs.first().map(|c| c.seed).unwrap_or(0), "clean-eval", 0),
    };
    let clean_preds = argmax_rows(&target.logits(x, eval_draw)?);
    let clean_correct: Vec<bool> = clean_preds
        .iter()
        .zip(labels.iter())
        .map(|(p, y)| p == y)
        .collect();
    let clean_accuracy =
        clean_correct.iter().filter(|&&c| c).count() as f64 / n.max(1) as f64;

    let mut robust_correct = vec![true; n];
    for config in configs {
        let result = pgd_attack_with_mode(target, x, labels, config, mode)?;
        let preds = argmax_rows(&target.logits(&result.adversarial_images, eval_draw)?);
        for i in 0..n {
            robust_correct[i] &= preds[i] == labels[i];
        }
    }
    let robust_accuracy =
        robust_correct.iter().filter(|&&c| c).count() as f64 / n.max(1) as f64;
    let sanity_warning = (robust_accuracy > clean_accuracy).then(|| {
        format!("robust accuracy {robust_accuracy} exceeds clean accuracy {clean_accuracy}")
    });
    Ok(EvalReport {
        clean_accuracy,
        robust_accuracy,
        sanity_warning,
    })
}

/// Per-example worst-case adversarial images across several attack configs,
/// ranked by cross-entropy loss against the true labels. Used where
/// downstream analysis needs one adversarial counterpart per example.
pub fn worst_case_adversarial(
    target: &dyn AttackTarget,
    x: &Images,
    labels: &Array1<usize>,
    configs: &[AttackConfig],
    mode: EvalMode,
) -> Result<Images> {
    if configs.is_empty() {
        return Err(Error::argument("need at least one attack config"));
    }
    let eval_draw = match mode {
        EvalMode::SeededNoise(s) => s,
        _ => derive_seed(configs[0].seed, "worst-case-eval", 0),
    };
    let n = x.dim().0;
    let mut best = x.clone();
    let mut best_loss = Array1::<f64>::from_elem(n, f64::NEG_INFINITY);
    for config in configs {
        let result = pgd_attack_with_mode(target, x, labels, config, mode)?;
        let objective = ObjectiveData::CrossEntropy { labels };
        let (losses, _) = target.loss_and_grad(&result.adversarial_images, &objective, eval_draw)?;
        for i in 0..n {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best.slice_mut(s![i, .., .., ..])
                    .assign(&result.adversarial_images.slice(s![i, .., .., ..]));
            }
        }
    }
    Ok(best)
}

/// Named evaluation presets recorded in the results ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackPreset {
    /// Proxy for the full ensemble evaluation: CE PGD-50 x 10 restarts plus
    /// KL PGD-50, worst case per example. Labeled as a proxy in all reports.
    StrongPgd,
    /// CE PGD-10, single restart; for smoke tests and quick loops.
    FastPgd,
}

impl AttackPreset {
    pub fn id(&self) -> &'static str {
        match self {
            AttackPreset::StrongPgd => "strong-pgd",
            AttackPreset::FastPgd => "fast-pgd",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "strong-pgd" => Ok(AttackPreset::StrongPgd),
            "fast-pgd" => Ok(AttackPreset::FastPgd),
            other => Err(Error::config(format!("unknown attack preset {other}"))),
        }
    }

    pub fn configs(&self, epsilon: f64, alpha: f64, seed: u64) -> Vec<AttackConfig> {
        match self {
            AttackPreset::StrongPgd => vec![
                AttackConfig {
                    epsilon,
                    alpha,
                    steps: 50,
                    restarts: 10,
                    objective: AttackObjective::CrossEntropy,
                    random_init: true,
                    seed,
                },
                AttackConfig {
                    epsilon,
                    alpha,
                    steps: 50,
                    restarts: 1,
                    objective: AttackObjective::KlDivergence,
                    random_init: true,
                    seed: derive_seed(seed, "kl-arm", 0),
                },
            ],
            AttackPreset::FastPgd => vec![AttackConfig {
                epsilon,
                alpha,
                steps: 10,
                restarts: 1,
                objective: AttackObjective::CrossEntropy,
                random_init: true,
                seed,
            }],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_array;

    #[test]
    fn projection_matches_elementwise_oracle() {
        let mut rng = substream(40, "proj", 0);
        let candidate: Images = uniform_array(&mut rng, (4, 1, 5, 5), -0.5, 1.5);
        let anchor: Images = uniform_array(&mut rng, (4, 1, 5, 5), 0.0, 1.0);
        let eps = 8.0 / 255.0;
        let out = project_linf(&candidate, &anchor, eps).unwrap();
        for (o, (c, a)) in out.iter().zip(candidate.iter().zip(anchor.iter())) {
            let oracle = c.clamp(a - eps, a + eps).clamp(0.0, 1.0);
            assert_eq!(*o, oracle);
        }
        // Interior point passes through unchanged.
        let same = project_linf(&anchor, &anchor, eps).unwrap();
        assert_eq!(same, anchor);
        // Clamp arithmetic example.
        let c = Images::from_elem((1, 1, 1, 1), 0.9);
        let a = Images::from_elem((1, 1, 1, 1), 0.5);
        let p = project_linf(&c, &a, eps).unwrap();
        assert!((p[[0, 0, 0, 0]] - (0.5 + eps)).abs() < 1e-15);
    }

    #[test]
    fn projection_shape_mismatch_errors() {
        let a = Images::zeros((1, 1, 2, 2));
        let b = Images::zeros((2, 1, 2, 2));
        assert!(matches!(
            project_linf(&a, &b, 0.1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_steps_without_init_is_identity() {
        let mut rng = substream(41, "pgd-noop", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 3, 3));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (2, 1, 3, 3), 0.2, 0.8);
        let labels = ndarray::array![0_usize, 1];
        let config = AttackConfig {
            steps: 0,
            random_init: false,
            ..Default::default()
        };
        let result = pgd_attack(&target, &x, &labels, &config).unwrap();
        assert_eq!(result.adversarial_images, x);
    }

    #[test]
    fn linear_model_matches_closed_form() {
        // Binary logit w.x with label 0: gradient sign is sign(w) at every
        // step, so k steps move min(k*alpha, eps) along it, then project.
        let mut rng = substream(42, "pgd-linear", 0);
        for trial in 0..10 {
            let w: Images = normal_array(&mut rng, (1, 1, 4, 4));
            let target = LinearBinaryTarget::new(w.clone());
            let x: Images = uniform_array(&mut rng, (3, 1, 4, 4), 0.1, 0.9);
            let labels = Array1::from_elem(3, 0);
            let config = AttackConfig {
                steps: 7,
                random_init: false,
                seed: trial,
                ..Default::default()
            };
            let result = pgd_attack(&target, &x, &labels, &config).unwrap();
            let move_len = (7.0 * config.alpha).min(config.epsilon);
            let mut expected = x.clone();
            for i in 0..3 {
                let mut row = expected.slice_mut(s![i, .., .., ..]);
                row.zip_mut_with(&w.slice(s![0, .., .., ..]), |v, &wv| {
                    *v += move_len * sign0(wv)
                });
            }
            let expected = project_linf(&expected, &x, config.epsilon).unwrap();
            let max_diff = (&result.adversarial_images - &expected)
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(max_diff < 1e-10, "trial {trial}: diff {max_diff}");
        }
    }

    #[test]
    fn ball_and_range_invariants_hold() {
        let mut rng = substream(43, "pgd-inv", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 4, 4));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (5, 1, 4, 4), 0.0, 1.0);
        let labels = Array1::from_iter((0..5).map(|i| i % 2));
        let config = AttackConfig {
            steps: 20,
            restarts: 3,
            ..Default::default()
        };
        let result = pgd_attack(&target, &x, &labels, &config).unwrap();
        let adv = &result.adversarial_images;
        for (a, o) in adv.iter().zip(x.iter()) {
            assert!((a - o).abs() <= config.epsilon + f64::EPSILON);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn pgd_replays_bit_identically() {
        let mut rng = substream(44, "pgd-replay", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 4, 4));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (3, 1, 4, 4), 0.0, 1.0);
        let labels = Array1::from_elem(3, 0);
        let config = AttackConfig {
            steps: 15,
            restarts: 2,
            seed: 77,
            ..Default::default()
        };
        let a = pgd_attack(&target, &x, &labels, &config).unwrap();
        let b = pgd_attack(&target, &x, &labels, &config).unwrap();
        assert_eq!(a.adversarial_images, b.adversarial_images);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn loss_trace_monotone_for_linear_cross_entropy() {
        let mut rng = substream(45, "pgd-mono", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 4, 4));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (4, 1, 4, 4), 0.3, 0.7);
        let labels = Array1::from_elem(4, 0);
        let config = AttackConfig {
            steps: 12,
            random_init: false,
            ..Default::default()
        };
        let result = pgd_attack(&target, &x, &labels, &config).unwrap();
        for win in result.loss_trace.windows(2) {
            assert!(win[1] >= win[0] - 1e-12, "trace decreased: {win:?}");
        }
    }

    #[test]
    fn worst_case_loss_monotone_in_restarts() {
        let mut rng = substream(46, "pgd-restarts", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 4, 4));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (4, 1, 4, 4), 0.0, 1.0);
        let labels = Array1::from_elem(4, 0);
        let mut prev = Array1::from_elem(4, f64::NEG_INFINITY);
        for restarts in [1, 2, 4, 8] {
            let config = AttackConfig {
                steps: 5,
                restarts,
                seed: 5,
                ..Default::default()
            };
            let result = pgd_attack(&target, &x, &labels, &config).unwrap();
            for i in 0..4 {
                assert!(result.final_losses[i] >= prev[i] - 1e-15);
            }
            prev = result.final_losses;
        }
    }

    #[test]
    fn epsilon_zero_makes_robust_equal_clean() {
        let mut rng = substream(47, "pgd-eps0", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 4, 4));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (6, 1, 4, 4), 0.0, 1.0);
        let labels = Array1::from_iter((0..6).map(|i| i % 2));
        let config = AttackConfig {
            epsilon: 0.0,
            steps: 10,
            ..Default::default()
        };
        let report = evaluate_robust(&target, &x, &labels, &config, EvalMode::Plain).unwrap();
        assert_eq!(report.clean_accuracy, report.robust_accuracy);
    }

    #[test]
    fn eot_on_deterministic_target_equals_plain_gradient() {
        let mut rng = substream(48, "eot-det", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 3, 3));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (2, 1, 3, 3), 0.0, 1.0);
        let labels = ndarray::array![0_usize, 1];
        let data = ObjectiveData::CrossEntropy { labels: &labels };
        let (_, g1) = target.loss_and_grad(&x, &data, 0).unwrap();
        for n_draws in [1, 4, 16] {
            let (_, ge) = eot_gradient(&target, &x, &data, n_draws, 9).unwrap();
            let diff = (&g1 - &ge).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12);
        }
        assert!(eot_gradient(&target, &x, &data, 0, 9).is_err());
    }

    #[test]
    fn attack_lint_flags_alpha_above_epsilon() {
        let config = AttackConfig {
            alpha: 0.5,
            epsilon: 0.1,
            ..Default::default()
        };
        assert!(config.lint().is_some());
        assert!(AttackConfig::default().lint().is_none());
    }
}
