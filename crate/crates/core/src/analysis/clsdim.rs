//! Classification dimension: accuracy as a function of how many principal
//! components of the clean feature space the classification head sees.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackConfig};
use crate::data::LabeledImageBatch;
use crate::diffusion::argmax_rows;
use crate::error::{Error, Result};
use crate::robust::{ClassifierTarget, RobustClassifier};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClsDimReport {
    /// (K, clean accuracy) for K = 0..=d.
    pub accuracy_curve: Vec<(usize, f64)>,
    /// (K, robust accuracy) using clean eigenvectors on adversarial features.
    pub robust_curve: Vec<(usize, f64)>,
    /// Smallest K recovering 95% / 99% of the full-feature clean accuracy.
    pub cls95: usize,
    pub cls99: usize,
    /// K maximizing robust accuracy (smallest K on ties, K >= 1).
    pub robust_dim: usize,
    /// Numerical rank of the feature covariance; below d means the spectrum
    /// was zero-padded.
    pub rank: usize,
    pub spectrum_zero_padded: bool,
}

/// PCA basis of the clean features with a deterministic sign convention.
struct Pca {
    mean: Array1<f64>,
    /// Eigenvectors as rows, sorted by descending eigenvalue.
    basis: Array2<f64>,
    rank: usize,
}

fn fit_pca(features: &Array2<f64>) -> Pca {
    let (n, d) = features.dim();
    let mean = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let mut centered = features.clone();
    for mut row in centered.rows_mut() {
        row.zip_mut_with(&mean, |v, &m| *v -= m);
    }
    let cov = centered.t().dot(&centered) / n as f64;
    let cov_na = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = cov_na.symmetric_eigen();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let rank = eig
        .eigenvalues
        .iter()
        .filter(|&&v| v > 1e-10 * max_eig.max(1e-300))
        .count();

    let mut basis = Array2::<f64>::zeros((d, d));
    for (row, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        // Sign convention: largest-magnitude entry positive.
        let mut pivot = 0;
        for i in 0..d {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[[row, i]] = sign * col[i];
        }
    }
    Pca { mean, basis, rank }
}

impl Pca {
    /// Mean-consistent projection onto the top-K eigenvectors:
    /// h_proj = mean + sum_{i<=K} <h - mean, v_i> v_i.
    fn project(&self, features: &Array2<f64>, k: usize) -> Array2<f64> {
        let (n, d) = features.dim();
        let mut out = Array2::<f64>::zeros((n, d));
        for r in 0..n {
            let mut proj: Vec<f64> = self.mean.to_vec();
            for i in 0..k {
                let mut coef = 0.0;
                for c in 0..d {
                    coef += (features[[r, c]] - self.mean[c]) * self.basis[[i, c]];
                }
                for c in 0..d {
                    proj[c] += coef * self.basis[[i, c]];
                }
            }
            for c in 0..d {
                out[[r, c]] = proj[c];
            }
        }
        out
    }
}

fn head_accuracy(model: &RobustClassifier, features: &Array2<f64>, labels: &Array1<usize>) -> f64 {
    let preds = argmax_rows(&model.head_logits(features));
    preds
        .iter()
        .zip(labels.iter())
        .filter(|(p, y)| p == y)
        .count() as f64
        / labels.len().max(1) as f64
}

/// Compute the clean and robust-aware classification-dimension curves.
///
/// Eigenvectors come from clean features only; the robust curve projects
/// adversarial features onto that clean basis before the head.
pub fn classification_dimension(
    model: &RobustClassifier,
    data: &LabeledImageBatch,
    attack: &AttackConfig,
    thresholds: (f64, f64),
) -> Result<ClsDimReport> {
    if data.is_empty() {
        return Err(Error::argument("classification dimension needs data"));
    }
    let feats_clean = model.features(&data.images);
    let d = feats_clean.ncols();

    let adv = {
        let target = ClassifierTarget { model };
        pgd_attack(&target, &data.images, &data.labels, attack)?.adversarial_images
    };
    let feats_adv = model.features(&adv);

    let pca = fit_pca(&feats_clean);
    let mut accuracy_curve = Vec::with_capacity(d + 1);
    let mut robust_curve = Vec::with_capacity(d + 1);
    for k in 0..=d {
        let pc = pca.project(&feats_clean, k);
        accuracy_curve.push((k, head_accuracy(model, &pc, &data.labels)));
        let pa = pca.project(&feats_adv, k);
        robust_curve.push((k, head_accuracy(model, &pa, &data.labels)));
    }

    let full_acc = accuracy_curve[d].1;
    let min_k = |threshold: f64| -> usize {
        accuracy_curve
            .iter()
            .find(|(_, acc)| *acc >= threshold * full_acc)
            .map(|(k, _)| *k)
            .unwrap_or(d)
    };
    let cls95 = min_k(thresholds.0);
    let cls99 = min_k(thresholds.1);

    let mut robust_dim = 1;
    for (k, acc) in robust_curve.iter().skip(1) {
        if *acc > robust_curve[robust_dim].1 {
            robust_dim = *k;
        }
    }

    Ok(ClsDimReport {
        accuracy_curve,
        robust_curve,
        cls95,
        cls99,
        robust_dim,
        rank: pca.rank,
        spectrum_zero_padded: pca.rank < d,
    })
}
