//! Differentiable primitives.
//!
//! Every op comes as a `_forward` / `_backward` pair in plain f64. Backward
//! passes are exact analytic gradients; the test suite pins them against
//! central finite differences, so changes here must keep that contract.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};

/// (batch, channels, height, width) image/activation tensor.
pub type Images = Array4<f64>;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold image patches into a (n*oh*ow, cin*kh*kw) matrix.
fn im2col(x: &Images, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, cin, h, w) = x.dim();
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((n * oh * ow, cin * kh * kw));
    for bi in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (bi * oh + oi) * ow + oj;
                let base_i = (oi * stride) as isize - pad as isize;
                let base_j = (oj * stride) as isize - pad as isize;
                let mut cidx = 0;
                for c in 0..cin {
                    for ki in 0..kh {
                        let ii = base_i + ki as isize;
                        if ii < 0 || ii >= h as isize {
                            cidx += kw;
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = base_j + kj as isize;
                            if jj >= 0 && jj < w as isize {
                                col[[row, cidx]] = x[[bi, c, ii as usize, jj as usize]];
                            }
                            cidx += 1;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column matrix back into image layout; adjoint of [`im2col`].
fn col2im(
    col: &Array2<f64>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Images {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut x = Images::zeros((n, cin, h, w));
    for bi in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (bi * oh + oi) * ow + oj;
                let base_i = (oi * stride) as isize - pad as isize;
                let base_j = (oj * stride) as isize - pad as isize;
                let mut cidx = 0;
                for c in 0..cin {
                    for ki in 0..kh {
                        let ii = base_i + ki as isize;
                        if ii < 0 || ii >= h as isize {
                            cidx += kw;
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = base_j + kj as isize;
                            if jj >= 0 && jj < w as isize {
                                x[[bi, c, ii as usize, jj as usize]] += col[[row, cidx]];
                            }
                            cidx += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2D convolution; weight layout (cout, cin, kh, kw).
pub fn conv2d_forward(
    x: &Images,
    weight: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Images {
    let (n, cin, h, w) = x.dim();
    let (cout, cin_w, kh, kw) = weight.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let col = im2col(x, kh, kw, stride, pad);
    let w_mat = weight
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("contiguous weight");
    let y_mat = col.dot(&w_mat.t()); // (n*oh*ow, cout)
    let mut y = Images::zeros((n, cout, oh, ow));
    for bi in 0..n {
        for co in 0..cout {
            let b_val = bias[co];
            for oi in 0..oh {
                for oj in 0..ow {
                    y[[bi, co, oi, oj]] = y_mat[[(bi * oh + oi) * ow + oj, co]] + b_val;
                }
            }
        }
    }
    y
}

/// Gradients of conv2d wrt input, weight and bias.
pub fn conv2d_backward(
    x: &Images,
    weight: &Array4<f64>,
    stride: usize,
    pad: usize,
    gy: &Images,
) -> (Images, Array4<f64>, Array1<f64>) {
    let (n, cin, h, w) = x.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (_, _, oh, ow) = gy.dim();
    let mut gy_mat = Array2::<f64>::zeros((n * oh * ow, cout));
    for bi in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    gy_mat[[(bi * oh + oi) * ow + oj, co]] = gy[[bi, co, oi, oj]];
                }
            }
        }
    }
    let col = im2col(x, kh, kw, stride, pad);
    let w_mat = weight
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("contiguous weight");
    let gw_mat = gy_mat.t().dot(&col);
    let gw = gw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("gw shape");
    let gb = gy_mat.sum_axis(Axis(0));
    let gcol = gy_mat.dot(&w_mat);
    let gx = col2im(&gcol, n, cin, h, w, kh, kw, stride, pad);
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Dense layers and activations
// ---------------------------------------------------------------------------

/// y = x W^T + b with weight layout (dout, din).
pub fn linear_forward(x: &Array2<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    x.dot(&weight.t()) + bias
}

pub fn linear_backward(
    x: &Array2<f64>,
    weight: &Array2<f64>,
    gy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let gx = gy.dot(weight);
    let gw = gy.t().dot(x);
    let gb = gy.sum_axis(Axis(0));
    (gx, gw, gb)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU: x * sigmoid(x). Smooth everywhere, which keeps the finite-difference
/// gradient checks clean (a ReLU kink would not).
pub fn silu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    gy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = x.clone();
    gx.zip_mut_with(gy, |v, &g| {
        let s = sigmoid(*v);
        *v = g * (s * (1.0 + *v * (1.0 - s)));
    });
    gx
}

/// Mean over spatial dimensions: (n,c,h,w) -> (n,c).
pub fn global_mean_pool(x: &Images) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array2::<f64>::zeros((n, c));
    let scale = 1.0 / (h * w) as f64;
    for bi in 0..n {
        for ci in 0..c {
            y[[bi, ci]] = x.slice(s![bi, ci, .., ..]).sum() * scale;
        }
    }
    y
}

pub fn global_mean_pool_backward(x_shape: (usize, usize, usize, usize), gy: &Array2<f64>) -> Images {
    let (n, c, h, w) = x_shape;
    let scale = 1.0 / (h * w) as f64;
    let mut gx = Images::zeros((n, c, h, w));
    for bi in 0..n {
        for ci in 0..c {
            gx.slice_mut(s![bi, ci, .., ..]).fill(gy[[bi, ci]] * scale);
        }
    }
    gx
}

/// Nearest-neighbour upsampling by 2 in both spatial dimensions.
pub fn upsample2_forward(x: &Images) -> Images {
    let (n, c, h, w) = x.dim();
    let mut y = Images::zeros((n, c, 2 * h, 2 * w));
    for bi in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    y[[bi, ci, 2 * i, 2 * j]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Images) -> Images {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Images::zeros((n, c, h, w));
    for bi in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[bi, ci, i, j]] = gy[[bi, ci, 2 * i, 2 * j]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j]]
                        + gy[[bi, ci, 2 * i, 2 * j + 1]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    gx
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Images, b: &Images) -> Images {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat shapes")
}

/// Split a channel-axis gradient back into the two inputs of
/// [`concat_channels`].
pub fn split_channels(g: &Images, ca: usize) -> (Images, Images) {
    let ga = g.slice(s![.., ..ca, .., ..]).to_owned();
    let gb = g.slice(s![.., ca.., .., ..]).to_owned();
    (ga, gb)
}

// ---------------------------------------------------------------------------
// Softmax-family losses
// ---------------------------------------------------------------------------

/// Numerically stable row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Mean cross-entropy and per-example losses for integer labels.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array1<f64>) {
    let lsm = log_softmax(logits);
    let mut per = Array1::<f64>::zeros(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        per[i] = -lsm[[i, y]];
    }
    let mean = per.mean().unwrap_or(0.0);
    (mean, per)
}

/// Gradient of mean cross-entropy wrt logits: (softmax - onehot) / n.
pub fn cross_entropy_backward(logits: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut g = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    g.mapv_inplace(|v| v / n);
    g
}

/// Mean KL(p_ref || softmax(logits_q)) and per-example values.
/// `p_ref` rows are probability vectors treated as constants.
pub fn kl_divergence(p_ref: &Array2<f64>, logits_q: &Array2<f64>) -> (f64, Array1<f64>) {
    let log_q = log_softmax(logits_q);
    let n = p_ref.nrows();
    let mut per = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..p_ref.ncols() {
            let p = p_ref[[i, j]];
            if p > 0.0 {
                acc += p * (p.ln() - log_q[[i, j]]);
            }
        }
        per[i] = acc;
    }
    let mean = per.mean().unwrap_or(0.0);
    (mean, per)
}

/// Gradient of mean KL(p_ref || softmax(logits_q)) wrt `logits_q`:
/// (softmax(logits_q) - p_ref) / n.
pub fn kl_divergence_backward(p_ref: &Array2<f64>, logits_q: &Array2<f64>) -> Array2<f64> {
    let n = p_ref.nrows() as f64;
    let mut g = softmax(logits_q);
    g.zip_mut_with(p_ref, |q, &p| *q = (*q - p) / n);
    g
}

/// Mean KL(softmax(logits_p) || softmax(logits_q)) with gradients through
/// BOTH logit sets, as the TRADES objective requires.
/// d/dp_k = p_k * ((ln p - ln q)_k - KL_row) / n ; d/dq = (q - p) / n.
pub fn kl_between_logits(logits_p: &Array2<f64>, logits_q: &Array2<f64>) -> f64 {
    let p = softmax(logits_p);
    kl_divergence(&p, logits_q).0
}

pub fn kl_between_logits_backward(
    logits_p: &Array2<f64>,
    logits_q: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n, k) = logits_p.dim();
    let lp = log_softmax(logits_p);
    let lq = log_softmax(logits_q);
    let p = lp.mapv(f64::exp);
    let q = lq.mapv(f64::exp);
    let mut gp = Array2::<f64>::zeros((n, k));
    let mut gq = Array2::<f64>::zeros((n, k));
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let mut kl_row = 0.0;
        for j in 0..k {
            kl_row += p[[i, j]] * (lp[[i, j]] - lq[[i, j]]);
        }
        for j in 0..k {
            gp[[i, j]] = p[[i, j]] * ((lp[[i, j]] - lq[[i, j]]) - kl_row) * inv_n;
            gq[[i, j]] = (q[[i, j]] - p[[i, j]]) * inv_n;
        }
    }
    (gp, gq)
}

// ---------------------------------------------------------------------------
// Instance norm (per example and channel over spatial positions)
// ---------------------------------------------------------------------------

pub struct InstanceNormCache {
    normed: Images,
    inv_std: Array2<f64>,
}

const IN_EPS: f64 = 1e-6;

/// Normalize each (example, channel) spatial map to zero mean and unit
/// variance, then apply per-channel gain and bias. Statistics are strictly
/// per example, so attack gradients never couple across a batch.
pub fn instance_norm_forward(
    x: &Images,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Images, InstanceNormCache) {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    let mut normed = Images::zeros((n, c, h, w));
    let mut inv_std = Array2::<f64>::zeros((n, c));
    let mut y = Images::zeros((n, c, h, w));
    for bi in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![bi, ci, .., ..]);
            let mean = plane.sum() / area;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / area;
            let istd = 1.0 / (var + IN_EPS).sqrt();
            inv_std[[bi, ci]] = istd;
            for i in 0..h {
                for j in 0..w {
                    let hn = (x[[bi, ci, i, j]] - mean) * istd;
                    normed[[bi, ci, i, j]] = hn;
                    y[[bi, ci, i, j]] = hn * gain[ci] + bias[ci];
                }
            }
        }
    }
    (y, InstanceNormCache { normed, inv_std })
}

pub fn instance_norm_backward(
    cache: &InstanceNormCache,
    gain: &Array1<f64>,
    gy: &Images,
) -> (Images, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = gy.dim();
    let area = (h * w) as f64;
    let mut gx = Images::zeros((n, c, h, w));
    let mut ggain = Array1::<f64>::zeros(c);
    let mut gbias = Array1::<f64>::zeros(c);
    for bi in 0..n {
        for ci in 0..c {
            let istd = cache.inv_std[[bi, ci]];
            let mut sum_gh = 0.0;
            let mut sum_gh_h = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let gh = gy[[bi, ci, i, j]] * gain[ci];
                    let hn = cache.normed[[bi, ci, i, j]];
                    sum_gh += gh;
                    sum_gh_h += gh * hn;
                    ggain[ci] += gy[[bi, ci, i, j]] * hn;
                    gbias[ci] += gy[[bi, ci, i, j]];
                }
            }
            for i in 0..h {
                for j in 0..w {
                    let gh = gy[[bi, ci, i, j]] * gain[ci];
                    let hn = cache.normed[[bi, ci, i, j]];
                    gx[[bi, ci, i, j]] =
                        istd * (gh - sum_gh / area - hn * sum_gh_h / area);
                }
            }
        }
    }
    (gx, ggain, gbias)
}

// ---------------------------------------------------------------------------
// Layer norm (token-wise, used by the patch-transformer encoder)
// ---------------------------------------------------------------------------

pub struct LayerNormCache {
    normed: Array3<f64>,
    inv_std: Array2<f64>,
}

const LN_EPS: f64 = 1e-6;

/// Normalize over the last axis of (n, tokens, dim), then scale and shift.
pub fn layer_norm_forward(
    x: &Array3<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array3<f64>, LayerNormCache) {
    let (n, t, d) = x.dim();
    let mut normed = Array3::<f64>::zeros((n, t, d));
    let mut inv_std = Array2::<f64>::zeros((n, t));
    let mut y = Array3::<f64>::zeros((n, t, d));
    for bi in 0..n {
        for ti in 0..t {
            let row = x.slice(s![bi, ti, ..]);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[[bi, ti]] = istd;
            for di in 0..d {
                let h = (x[[bi, ti, di]] - mean) * istd;
                normed[[bi, ti, di]] = h;
                y[[bi, ti, di]] = h * gain[di] + bias[di];
            }
        }
    }
    (y, LayerNormCache { normed, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    gy: &Array3<f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (n, t, d) = gy.dim();
    let mut gx = Array3::<f64>::zeros((n, t, d));
    let mut ggain = Array1::<f64>::zeros(d);
    let mut gbias = Array1::<f64>::zeros(d);
    for bi in 0..n {
        for ti in 0..t {
            let istd = cache.inv_std[[bi, ti]];
            let mut sum_gh = 0.0;
            let mut sum_gh_h = 0.0;
            for di in 0..d {
                let gh = gy[[bi, ti, di]] * gain[di];
                let h = cache.normed[[bi, ti, di]];
                sum_gh += gh;
                sum_gh_h += gh * h;
                ggain[di] += gy[[bi, ti, di]] * h;
                gbias[di] += gy[[bi, ti, di]];
            }
            let dn = d as f64;
            for di in 0..d {
                let gh = gy[[bi, ti, di]] * gain[di];
                let h = cache.normed[[bi, ti, di]];
                gx[[bi, ti, di]] = istd * (gh - sum_gh / dn - h * sum_gh_h / dn);
            }
        }
    }
    (gx, ggain, gbias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_array, substream};
    use approx::assert_abs_diff_eq;

    /// Central-difference check of a scalar function of one array.
    fn finite_diff_input<F>(x: &Images, f: F, analytic: &Images, tol: f64)
    where
        F: Fn(&Images) -> f64,
    {
        let h = 1e-6;
        for idx in ndarray::indices(x.raw_dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = analytic[idx];
            assert!(
                (num - ana).abs() <= tol * num.abs().max(ana.abs()).max(1.0),
                "grad mismatch at {idx:?}: numeric {num}, analytic {ana}"
            );
        }
    }

    #[test]
    fn conv_shapes() {
        assert_eq!(conv_out_size(16, 3, 1, 1), 16);
        assert_eq!(conv_out_size(16, 3, 2, 1), 8);
        let mut rng = substream(0, "conv-shapes", 0);
        let x = normal_array(&mut rng, (2, 3, 8, 8));
        let w = normal_array(&mut rng, (5, 3, 3, 3));
        let b = normal_array(&mut rng, 5);
        assert_eq!(conv2d_forward(&x, &w, &b, 1, 1).dim(), (2, 5, 8, 8));
        assert_eq!(conv2d_forward(&x, &w, &b, 2, 1).dim(), (2, 5, 4, 4));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = substream(1, "conv-grad", 0);
        for &(stride, pad) in &[(1_usize, 1_usize), (2, 1)] {
            let x: Images = normal_array(&mut rng, (2, 2, 6, 6));
            let w: Array4<f64> = normal_array(&mut rng, (3, 2, 3, 3));
            let b: Array1<f64> = normal_array(&mut rng, 3);
            // Scalar objective: weighted sum of outputs.
            let probe: Images = normal_array(
                &mut rng,
                (
                    2,
                    3,
                    conv_out_size(6, 3, stride, pad),
                    conv_out_size(6, 3, stride, pad),
                ),
            );
            let loss = |xx: &Images| (conv2d_forward(xx, &w, &b, stride, pad) * &probe).sum();
            let (gx, gw, gb) = conv2d_backward(&x, &w, stride, pad, &probe);
            finite_diff_input(&x, loss, &gx, 1e-6);

            // Weight gradient via the same probe trick.
            let h = 1e-6;
            for idx in ndarray::indices(w.raw_dim()) {
                let mut wp = w.clone();
                wp[idx] += h;
                let mut wm = w.clone();
                wm[idx] -= h;
                let num = ((conv2d_forward(&x, &wp, &b, stride, pad) * &probe).sum()
                    - (conv2d_forward(&x, &wm, &b, stride, pad) * &probe).sum())
                    / (2.0 * h);
                assert_abs_diff_eq!(num, gw[idx], epsilon = 1e-5);
            }
            for i in 0..3 {
                let mut bp = b.clone();
                bp[i] += h;
                let mut bm = b.clone();
                bm[i] -= h;
                let num = ((conv2d_forward(&x, &w, &bp, stride, pad) * &probe).sum()
                    - (conv2d_forward(&x, &w, &bm, stride, pad) * &probe).sum())
                    / (2.0 * h);
                assert_abs_diff_eq!(num, gb[i], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn silu_gradient() {
        let mut rng = substream(2, "silu", 0);
        let x: Array2<f64> = normal_array(&mut rng, (4, 5));
        let probe: Array2<f64> = normal_array(&mut rng, (4, 5));
        let g = silu_backward(&x, &probe);
        let h = 1e-6;
        for idx in ndarray::indices(x.raw_dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = ((silu(&xp) * &probe).sum() - (silu(&xm) * &probe).sum()) / (2.0 * h);
            assert_abs_diff_eq!(num, g[idx], epsilon = 1e-7);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shapes() {
        let mut rng = substream(3, "pool", 0);
        let x: Images = normal_array(&mut rng, (2, 3, 4, 4));
        let pooled = global_mean_pool(&x);
        assert_eq!(pooled.dim(), (2, 3));
        assert_abs_diff_eq!(pooled[[0, 0]], x.slice(s![0, 0, .., ..]).mean().unwrap());

        let up = upsample2_forward(&x);
        assert_eq!(up.dim(), (2, 3, 8, 8));
        // Adjoint identity: <up(x), y> == <x, down(y)>.
        let y: Images = normal_array(&mut rng, (2, 3, 8, 8));
        let lhs = (&up * &y).sum();
        let rhs = (&x * &upsample2_backward(&y)).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn cross_entropy_and_kl_identities() {
        let logits = ndarray::array![[2.0, 0.0], [0.0, 2.0]];
        let (ce, per) = cross_entropy(&logits, &[0, 1]);
        // -log(sigmoid(2)) per row.
        let expect = (1.0 + (-2.0_f64).exp()).ln();
        assert_abs_diff_eq!(per[0], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(ce, expect, epsilon = 1e-12);

        // KL of a distribution with itself is zero.
        let p = softmax(&logits);
        let (kl, _) = kl_divergence(&p, &logits);
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-12);
        // And strictly positive against a different distribution.
        let other = ndarray::array![[0.0, 2.0], [2.0, 0.0]];
        let (kl2, _) = kl_divergence(&p, &other);
        assert!(kl2 > 0.1);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = substream(4, "loss-grad", 0);
        let logits: Array2<f64> = normal_array(&mut rng, (3, 4));
        let labels = vec![0_usize, 3, 1];
        let g = cross_entropy_backward(&logits, &labels);
        let h = 1e-6;
        for idx in ndarray::indices(logits.raw_dim()) {
            let mut lp = logits.clone();
            lp[idx] += h;
            let mut lm = logits.clone();
            lm[idx] -= h;
            let num = (cross_entropy(&lp, &labels).0 - cross_entropy(&lm, &labels).0) / (2.0 * h);
            assert_abs_diff_eq!(num, g[idx], epsilon = 1e-7);
        }

        let p_ref = softmax(&normal_array(&mut rng, (3, 4)));
        let gq = kl_divergence_backward(&p_ref, &logits);
        for idx in ndarray::indices(logits.raw_dim()) {
            let mut lp = logits.clone();
            lp[idx] += h;
            let mut lm = logits.clone();
            lm[idx] -= h;
            let num = (kl_divergence(&p_ref, &lp).0 - kl_divergence(&p_ref, &lm).0) / (2.0 * h);
            assert_abs_diff_eq!(num, gq[idx], epsilon = 1e-7);
        }
    }

    #[test]
    fn kl_between_logits_gradients_cover_both_sides() {
        let mut rng = substream(6, "kl-both", 0);
        let a: Array2<f64> = normal_array(&mut rng, (3, 4));
        let b: Array2<f64> = normal_array(&mut rng, (3, 4));
        let (gp, gq) = kl_between_logits_backward(&a, &b);
        let h = 1e-6;
        for idx in ndarray::indices(a.raw_dim()) {
            let mut ap = a.clone();
            ap[idx] += h;
            let mut am = a.clone();
            am[idx] -= h;
            let num = (kl_between_logits(&ap, &b) - kl_between_logits(&am, &b)) / (2.0 * h);
            assert_abs_diff_eq!(num, gp[idx], epsilon = 1e-7);

            let mut bp = b.clone();
            bp[idx] += h;
            let mut bm = b.clone();
            bm[idx] -= h;
            let num = (kl_between_logits(&a, &bp) - kl_between_logits(&a, &bm)) / (2.0 * h);
            assert_abs_diff_eq!(num, gq[idx], epsilon = 1e-7);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = substream(5, "ln", 0);
        let x: Array3<f64> = normal_array(&mut rng, (2, 3, 5));
        let gain: Array1<f64> = normal_array(&mut rng, 5);
        let bias: Array1<f64> = normal_array(&mut rng, 5);
        let probe: Array3<f64> = normal_array(&mut rng, (2, 3, 5));
        let (_, cache) = layer_norm_forward(&x, &gain, &bias);
        let (gx, ggain, gbias) = layer_norm_backward(&cache, &gain, &probe);

        let f = |xx: &Array3<f64>, gg: &Array1<f64>, bb: &Array1<f64>| {
            (layer_norm_forward(xx, gg, bb).0 * &probe).sum()
        };
        let h = 1e-6;
        for idx in ndarray::indices(x.raw_dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (f(&xp, &gain, &bias) - f(&xm, &gain, &bias)) / (2.0 * h);
            assert_abs_diff_eq!(num, gx[idx], epsilon = 1e-6);
        }
        for i in 0..5 {
            let mut gp = gain.clone();
            gp[i] += h;
            let mut gm = gain.clone();
            gm[i] -= h;
            let num = (f(&x, &gp, &bias) - f(&x, &gm, &bias)) / (2.0 * h);
            assert_abs_diff_eq!(num, ggain[i], epsilon = 1e-6);
            let mut bp = bias.clone();
            bp[i] += h;
            let mut bm = bias.clone();
            bm[i] -= h;
            let num = (f(&x, &gain, &bp) - f(&x, &gain, &bm)) / (2.0 * h);
            assert_abs_diff_eq!(num, gbias[i], epsilon = 1e-6);
        }
    }
}
