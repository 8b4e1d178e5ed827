//! TopK sparse autoencoders over stored activations.
//!
//! Encoder keeps the K largest latent activations and zeroes the rest;
//! decoder columns are renormalized to unit length after every update. The
//! normalized reconstruction loss divides by the dataset-mean predictor's
//! error, so 0 is perfect and 1.0 is the mean baseline.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::ParamSet;
use crate::rng::{normal_array, substream};

#[derive(Debug, Clone)]
pub struct SparseAutoencoder {
    /// Encoder weights, (latents x d).
    pub w_enc: Array2<f64>,
    /// Decoder weights, (d x latents); unit-norm columns after training.
    pub w_dec: Array2<f64>,
    /// Input bias (the activation mean); reconstruction is relative to it.
    pub bias: Array1<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

impl SparseAutoencoder {
    /// Untrained autoencoder with a zero decoder: reconstruction equals the
    /// mean, normalized loss 1.0 by construction.
    pub fn zero_decoder(d: usize, m: usize, k: usize, bias: Array1<f64>) -> Self {
        SparseAutoencoder {
            w_enc: Array2::zeros((m, d)),
            w_dec: Array2::zeros((d, m)),
            bias,
            k,
        }
    }

    /// Indices and values of the top-K pre-activations per row (ties broken
    /// toward lower latent indices).
    fn encode_row(&self, xc: &[f64]) -> Vec<(usize, f64)> {
        let m = self.w_enc.nrows();
        let mut pre: Vec<(usize, f64)> = (0..m)
            .map(|l| {
                let mut acc = 0.0;
                for (c, &x) in xc.iter().enumerate() {
                    acc += self.w_enc[[l, c]] * x;
                }
                (l, acc)
            })
            .collect();
        pre.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
        pre.truncate(self.k);
        pre
    }

    /// Sparse codes as a dense (n x m) matrix.
    pub fn encode(&self, activations: &Array2<f64>) -> Array2<f64> {
        let (n, _) = activations.dim();
        let m = self.w_enc.nrows();
        let mut z = Array2::<f64>::zeros((n, m));
        for r in 0..n {
            let xc: Vec<f64> = activations
                .row(r)
                .iter()
                .zip(self.bias.iter())
                .map(|(x, b)| x - b)
                .collect();
            for (l, v) in self.encode_row(&xc) {
                z[[r, l]] = v;
            }
        }
        z
    }

    pub fn reconstruct(&self, activations: &Array2<f64>) -> Array2<f64> {
        let z = self.encode(activations);
        let mut out = z.dot(&self.w_dec.t());
        for mut row in out.rows_mut() {
            row.zip_mut_with(&self.bias, |v, &b| *v += b);
        }
        out
    }
}

fn renormalize_decoder_columns(w_dec: &mut Array2<f64>) {
    let (_, m) = w_dec.dim();
    for j in 0..m {
        let norm = w_dec.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            w_dec.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
}

/// Train a TopK SAE on pre-centered activations (the mean is folded into the
/// bias). Squared reconstruction error, Adam, decoder renormalized per step.
pub fn train_topk_sae(
    activations: &Array2<f64>,
    m: usize,
    k: usize,
    cfg: &SaeTrainConfig,
) -> Result<SparseAutoencoder> {
    let (n, d) = activations.dim();
    if k == 0 || k > m {
        return Err(Error::argument("need 1 <= K <= latent width"));
    }
    if n == 0 {
        return Err(Error::argument("SAE needs activations"));
    }
    let bias = activations.mean_axis(ndarray::Axis(0)).expect("nonempty");

    let mut rng = substream(cfg.seed, "sae-init", 0);
    let mut w_dec: Array2<f64> = normal_array(&mut rng, (d, m));
    renormalize_decoder_columns(&mut w_dec);
    // Tied but downscaled encoder: reconstructions start near zero, so the
    // starting loss sits near the mean baseline instead of far above it.
    let w_enc = w_dec.t().to_owned() * 0.1;

    let mut params = ParamSet::new();
    params.insert("w_enc", w_enc.into_dyn());
    params.insert("w_dec", w_dec.into_dyn());
    let mut opt = Adam::new(&params);

    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = substream(cfg.seed, "sae-batches", 0);
    for _epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let sae = SparseAutoencoder {
                w_enc: params
                    .get("w_enc")
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned(),
                w_dec: params
                    .get("w_dec")
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned(),
                bias: bias.clone(),
                k,
            };
            let bsz = chunk.len();
            let mut g_enc = Array2::<f64>::zeros(sae.w_enc.raw_dim());
            let mut g_dec = Array2::<f64>::zeros(sae.w_dec.raw_dim());
            let scale = 2.0 / (bsz * d) as f64;
            for &r in chunk {
                let xc: Vec<f64> = activations
                    .row(r)
                    .iter()
                    .zip(bias.iter())
                    .map(|(x, b)| x - b)
                    .collect();
                let active = sae.encode_row(&xc);
                // Residual of the centered reconstruction.
                let mut resid = vec![0.0_f64; d];
                for c in 0..d {
                    let mut rec = 0.0;
                    for &(l, v) in &active {
                        rec += sae.w_dec[[c, l]] * v;
                    }
                    resid[c] = rec - xc[c];
                }
                for &(l, v) in &active {
                    // dL/dw_dec[:,l] = scale * resid * z_l
                    for c in 0..d {
                        g_dec[[c, l]] += scale * resid[c] * v;
                    }
                    // dL/dz_l = scale * <resid, w_dec[:,l]>, then through the
                    // (linear on the active set) encoder row.
                    let mut gz = 0.0;
                    for c in 0..d {
                        gz += scale * resid[c] * sae.w_dec[[c, l]];
                    }
                    for c in 0..d {
                        g_enc[[l, c]] += gz * xc[c];
                    }
                }
            }
            let mut grads = params.zeros_like();
            *grads.get_mut("w_enc") = g_enc.into_dyn();
            *grads.get_mut("w_dec") = g_dec.into_dyn();
            opt.step(&mut params, &grads, cfg.lr)?;
            {
                let w = params.get_mut("w_dec");
                let mut view = w.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (_, mm) = view.dim();
                for j in 0..mm {
                    let norm = view.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        view.column_mut(j).mapv_inplace(|v| v / norm);
                    }
                }
            }
        }
    }

    Ok(SparseAutoencoder {
        w_enc: params
            .get("w_enc")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned(),
        w_dec: params
            .get("w_dec")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned(),
        bias,
        k,
    })
}

/// Mean squared reconstruction error divided by the error of the
/// dataset-mean predictor on the same activations.
pub fn normalized_sae_loss(sae: &SparseAutoencoder, activations: &Array2<f64>) -> Result<f64> {
    let (n, d) = activations.dim();
    if n == 0 || d != sae.bias.len() {
        return Err(Error::argument("activation dims do not match the SAE"));
    }
    let mean = activations.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let mut baseline = 0.0;
    for r in 0..n {
        for c in 0..d {
            let diff = activations[[r, c]] - mean[c];
            baseline += diff * diff;
        }
    }
    if baseline == 0.0 {
        return Err(Error::argument(
            "zero-variance activations: normalizer undefined",
        ));
    }
    let recon = sae.reconstruct(activations);
    let mut err = 0.0;
    for (a, b) in recon.iter().zip(activations.iter()) {
        err += (a - b) * (a - b);
    }
    Ok(err / baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_decoder_gives_exactly_mean_baseline() {
        let mut rng = substream(95, "sae-zero", 0);
        let acts: Array2<f64> = normal_array(&mut rng, (50, 8));
        let mean = acts.mean_axis(ndarray::Axis(0)).unwrap();
        let sae = SparseAutoencoder::zero_decoder(8, 32, 4, mean);
        assert_abs_diff_eq!(
            normalized_sae_loss(&sae, &acts).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn perfect_reconstruction_gives_zero() {
        // Identity-like SAE: d = m = k, orthonormal decoder.
        let d = 4;
        let acts = ndarray::array![
            [1.0, 2.0, 3.0, 4.0],
            [0.5, -1.0, 2.0, 0.0],
            [2.0, 0.0, -1.0, 1.0]
        ];
        let mean = acts.mean_axis(ndarray::Axis(0)).unwrap();
        let mut sae = SparseAutoencoder::zero_decoder(d, d, d, mean);
        for i in 0..d {
            sae.w_enc[[i, i]] = 1.0;
            sae.w_dec[[i, i]] = 1.0;
        }
        assert_abs_diff_eq!(
            normalized_sae_loss(&sae, &acts).unwrap(),
            0.0,
            epsilon = 1e-24
        );
    }

    #[test]
    fn planted_subspace_is_recovered() {
        // Data = positive combinations of K orthogonal directions.
        let (d, k, m) = (12, 3, 24);
        let mut rng = substream(96, "sae-plant", 0);
        let n = 256;
        let mut acts = Array2::<f64>::zeros((n, d));
        for r in 0..n {
            for i in 0..k {
                use rand::Rng;
                let coef: f64 = rng.random_range(0.5..1.5);
                acts[[r, 4 * i]] += coef; // axis-aligned orthogonal atoms
            }
        }
        let sae = train_topk_sae(&acts, m, k, &SaeTrainConfig::default()).unwrap();
        let loss = normalized_sae_loss(&sae, &acts).unwrap();
        assert!(loss < 0.05, "normalized loss {loss}");
    }

    #[test]
    fn unconstrained_sae_autoencodes() {
        let (d, m) = (6, 16);
        let mut rng = substream(97, "sae-full", 0);
        let acts: Array2<f64> = normal_array(&mut rng, (200, d));
        let sae = train_topk_sae(&acts, m, m, &SaeTrainConfig::default()).unwrap();
        let loss = normalized_sae_loss(&sae, &acts).unwrap();
        assert!(loss < 0.05, "normalized loss {loss}");
    }

    #[test]
    fn decoder_columns_are_unit_norm_after_training() {
        let mut rng = substream(98, "sae-norm", 0);
        let acts: Array2<f64> = normal_array(&mut rng, (64, 5));
        let sae = train_topk_sae(
            &acts,
            10,
            3,
            &SaeTrainConfig {
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        for j in 0..10 {
            let norm = sae.w_dec.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn argument_errors() {
        let acts = Array2::<f64>::zeros((4, 3));
        assert!(train_topk_sae(&acts, 8, 9, &SaeTrainConfig::default()).is_err());
        let mean = Array1::<f64>::zeros(3);
        let sae = SparseAutoencoder::zero_decoder(3, 8, 2, mean);
        // Zero-variance activations: the normalizer is undefined.
        assert!(normalized_sae_loss(&sae, &acts).is_err());
    }

    #[test]
    fn seeded_training_replays() {
        let mut rng = substream(99, "sae-det", 0);
        let acts: Array2<f64> = normal_array(&mut rng, (64, 5));
        let cfg = SaeTrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let a = train_topk_sae(&acts, 10, 3, &cfg).unwrap();
        let b = train_topk_sae(&acts, 10, 3, &cfg).unwrap();
        assert_eq!(a.w_enc, b.w_enc);
        assert_eq!(a.w_dec, b.w_dec);
    }
}
