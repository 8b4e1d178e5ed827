//! Linear probes over frozen features: multinomial logistic regression
//! trained full-batch with Adam from zero init, so no randomness is involved
//! and probe results replay exactly.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{ops, ParamSet};

#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weight: Array2<f64>, // (classes, dim)
    pub bias: Array1<f64>,
    mean: Array1<f64>,
    scale: Array1<f64>,
}

const PROBE_ITERS: usize = 250;
const PROBE_LR: f64 = 0.1;

/// Fit a probe on (features, labels). Features are standardized internally.
pub fn train_linear_probe(
    features: &Array2<f64>,
    labels: &Array1<usize>,
    num_classes: usize,
) -> Result<LinearProbe> {
    let (n, d) = features.dim();
    if n == 0 || labels.len() != n {
        return Err(Error::argument("probe needs matching features and labels"));
    }
    let mean = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let mut scale = Array1::<f64>::zeros(d);
    for j in 0..d {
        let col = features.column(j);
        let var = col.iter().map(|&v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64;
        scale[j] = 1.0 / (var.sqrt() + 1e-8);
    }
    let mut x = features.clone();
    for j in 0..d {
        let (m, s) = (mean[j], scale[j]);
        x.column_mut(j).mapv_inplace(|v| (v - m) * s);
    }
    let label_vec: Vec<usize> = labels.to_vec();

    let mut params = ParamSet::new();
    params.insert("w", Array2::<f64>::zeros((num_classes, d)).into_dyn());
    params.insert("b", Array1::<f64>::zeros(num_classes).into_dyn());
    let mut opt = Adam::new(&params);
    for step in 0..PROBE_ITERS {
        let w = params
            .get("w")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let b = params
            .get("b")
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let logits = ops::linear_forward(&x, &w, &b);
        let (loss, _) = ops::cross_entropy(&logits, &label_vec);
        if !loss.is_finite() {
            return Err(Error::numeric("probe", format!("diverged at step {step}")));
        }
        let glogits = ops::cross_entropy_backward(&logits, &label_vec);
        let (_gx, gw, gb) = ops::linear_backward(&x, &w, &glogits);
        let mut grads = params.zeros_like();
        *grads.get_mut("w") = gw.into_dyn();
        *grads.get_mut("b") = gb.into_dyn();
        opt.step(&mut params, &grads, PROBE_LR)?;
    }
    Ok(LinearProbe {
        weight: params
            .get("w")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned(),
        bias: params
            .get("b")
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned(),
        mean,
        scale,
    })
}

impl LinearProbe {
    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut x = features.clone();
        for j in 0..x.ncols() {
            let (m, s) = (self.mean[j], self.scale[j]);
            x.column_mut(j).mapv_inplace(|v| (v - m) * s);
        }
        ops::linear_forward(&x, &self.weight, &self.bias)
    }

    /// Gradient of the probe logits wrt raw features, contracted with
    /// d(loss)/d(logits): returns d(loss)/d(features).
    pub fn backward_features(&self, g_logits: &Array2<f64>) -> Array2<f64> {
        let mut gx = g_logits.dot(&self.weight);
        for j in 0..gx.ncols() {
            let s = self.scale[j];
            gx.column_mut(j).mapv_inplace(|v| v * s);
        }
        gx
    }

    pub fn predict(&self, features: &Array2<f64>) -> Array1<usize> {
        argmax_rows(&self.logits(features))
    }

    pub fn accuracy(&self, features: &Array2<f64>, labels: &Array1<usize>) -> f64 {
        let pred = self.predict(features);
        let correct = pred
            .iter()
            .zip(labels.iter())
            .filter(|(p, y)| p == y)
            .count();
        correct as f64 / labels.len() as f64
    }
}

/// Row-wise argmax with the lowest index winning ties.
pub fn argmax_rows(logits: &Array2<f64>) -> Array1<usize> {
    Array1::from_iter(logits.rows().into_iter().map(|row| {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }))
}
