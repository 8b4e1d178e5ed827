//! Frequency saliency: mean magnitude spectrum of input loss-gradients.

use ndarray::{s, Array1, Array2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::attacks::{AttackTarget, ObjectiveData};
use crate::error::{Error, Result};
use crate::nn::Images;

/// Single map, or the difference of two models' maps on the same data.
pub enum SaliencyMode<'a> {
    Single,
    Difference(&'a dyn AttackTarget),
}

/// Mean over examples (and channels) of |DFT2(grad_x loss)|, low frequencies
/// centered. Difference mode returns map(target) - map(other) on the same
/// data and ordering; positive values mean increased sensitivity.
pub fn frequency_saliency(
    target: &dyn AttackTarget,
    images: &Images,
    labels: &Array1<usize>,
    mode: SaliencyMode<'_>,
) -> Result<Array2<f64>> {
    let own = saliency_map(target, images, labels)?;
    match mode {
        SaliencyMode::Single => Ok(fftshift2(&own)),
        SaliencyMode::Difference(other) => {
            let theirs = saliency_map(other, images, labels)?;
            Ok(fftshift2(&(&own - &theirs)))
        }
    }
}

fn saliency_map(
    target: &dyn AttackTarget,
    images: &Images,
    labels: &Array1<usize>,
) -> Result<Array2<f64>> {
    let (n, c, h, w) = images.dim();
    let objective = ObjectiveData::CrossEntropy { labels };
    // Draw 0 keeps randomized pipelines on one fixed noise realization.
    let (_, grads) = target.loss_and_grad(images, &objective, 0)?;
    if grads.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("frequency-saliency", "non-finite gradient"));
    }
    let mut acc = Array2::<f64>::zeros((h, w));
    for bi in 0..n {
        for ci in 0..c {
            let plane = grads.slice(s![bi, ci, .., ..]).to_owned();
            acc += &fft2_magnitude(&plane);
        }
    }
    acc.mapv_inplace(|v| v / (n * c) as f64);
    Ok(acc)
}

/// Magnitude of the 2D DFT of a real plane (rows then columns).
pub fn fft2_magnitude(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut planner = FftPlanner::<f64>::new();
    let fft_w = planner.plan_fft_forward(w);
    let fft_h = planner.plan_fft_forward(h);

    let mut grid: Vec<Vec<Complex64>> = (0..h)
        .map(|i| {
            let mut row: Vec<Complex64> = plane
                .row(i)
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            fft_w.process(&mut row);
            row
        })
        .collect();
    let mut out = Array2::<f64>::zeros((h, w));
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = grid[i][j];
        }
        fft_h.process(&mut col);
        for i in 0..h {
            grid[i][j] = col[i];
            out[[i, j]] = col[i].norm();
        }
    }
    out
}

/// Circularly shift so the zero-frequency bin sits at (h/2, w/2).
pub fn fftshift2(map: &Array2<f64>) -> Array2<f64> {
    let (h, w) = map.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[(i + h / 2) % h, (j + w / 2) % w]] = map[[i, j]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::LinearBinaryTarget;
    use crate::rng::{normal_array, substream, uniform_array};
    use approx::assert_abs_diff_eq;

    /// Naive O(N^4) DFT magnitude used as the analytic oracle.
    fn naive_dft_magnitude(plane: &Array2<f64>) -> Array2<f64> {
        let (h, w) = plane.dim();
        let mut out = Array2::<f64>::zeros((h, w));
        for u in 0..h {
            for v in 0..w {
                let mut re = 0.0;
                let mut im = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * (u as f64 * i as f64 / h as f64 + v as f64 * j as f64 / w as f64);
                        re += plane[[i, j]] * phase.cos();
                        im += plane[[i, j]] * phase.sin();
                    }
                }
                out[[u, v]] = (re * re + im * im).sqrt();
            }
        }
        out
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = substream(80, "fft", 0);
        let plane: Array2<f64> = normal_array(&mut rng, (8, 8));
        let fast = fft2_magnitude(&plane);
        let slow = naive_dft_magnitude(&plane);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn linear_model_map_matches_weight_spectrum() {
        let mut rng = substream(81, "freq-linear", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 8, 8));
        let target = LinearBinaryTarget::new(w.clone());
        let x: Images = uniform_array(&mut rng, (12, 1, 8, 8), 0.0, 1.0);
        let labels = Array1::from_elem(12, 0);
        let map = frequency_saliency(&target, &x, &labels, SaliencyMode::Single).unwrap();
        let analytic = fftshift2(&fft2_magnitude(&w.slice(s![0, 0, .., ..]).to_owned()));
        // Proportional up to a global scale: cosine similarity > 0.999.
        let dot: f64 = map.iter().zip(analytic.iter()).map(|(a, b)| a * b).sum();
        let na: f64 = map.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = dot / (na * nb);
        assert!(cos > 0.999, "cosine {cos}");
    }

    #[test]
    fn constant_gradient_concentrates_at_dc() {
        // A weight image of all ones gives a constant gradient per example.
        let w = Images::from_elem((1, 1, 8, 8), 1.0);
        let target = LinearBinaryTarget::new(w);
        let mut rng = substream(82, "freq-dc", 0);
        let x: Images = uniform_array(&mut rng, (4, 1, 8, 8), 0.0, 1.0);
        let labels = Array1::from_elem(4, 0);
        let map = frequency_saliency(&target, &x, &labels, SaliencyMode::Single).unwrap();
        // Centered DC bin holds all energy.
        for i in 0..8 {
            for j in 0..8 {
                if (i, j) == (4, 4) {
                    assert!(map[[i, j]] > 0.0);
                } else {
                    assert_abs_diff_eq!(map[[i, j]], 0.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn self_difference_is_identically_zero() {
        let mut rng = substream(83, "freq-diff", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 8, 8));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (3, 1, 8, 8), 0.0, 1.0);
        let labels = Array1::from_elem(3, 1);
        let map =
            frequency_saliency(&target, &x, &labels, SaliencyMode::Difference(&target)).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maps_are_nonnegative_and_conjugate_symmetric() {
        let mut rng = substream(84, "freq-sym", 0);
        let w: Images = normal_array(&mut rng, (1, 1, 8, 8));
        let target = LinearBinaryTarget::new(w);
        let x: Images = uniform_array(&mut rng, (5, 1, 8, 8), 0.0, 1.0);
        let labels = Array1::from_iter((0..5).map(|i| i % 2));
        let raw = saliency_map(&target, &x, &labels).unwrap();
        assert!(raw.iter().all(|&v| v >= 0.0));
        // Real input: |F(u,v)| == |F(-u mod H, -v mod W)|.
        for u in 0..8 {
            for v in 0..8 {
                let mirrored = raw[[(8 - u) % 8, (8 - v) % 8]];
                assert_abs_diff_eq!(raw[[u, v]], mirrored, epsilon = 1e-9);
            }
        }
        // The public map is the shifted raw map.
        let shifted = frequency_saliency(&target, &x, &labels, SaliencyMode::Single).unwrap();
        assert_eq!(shifted, fftshift2(&raw));
    }

    use ndarray::s;
}
