//! Representation measurements: alignment/uniformity on the unit
//! hypersphere, mutual-kNN-restricted kernel alignment (CKNNA), frequency
//! saliency maps, classification dimension, and TopK sparse autoencoders.

pub mod clsdim;
pub mod freq;
pub mod sae;

pub use clsdim::{classification_dimension, ClsDimReport};
pub use freq::{fftshift2, frequency_saliency, SaliencyMode};
pub use sae::{normalized_sae_loss, train_topk_sae, SaeTrainConfig, SparseAutoencoder};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveWriter};
use crate::error::{Error, Result};

/// Provenance of a feature matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RepresentationMeta {
    pub model_id: String,
    pub layer: String,
    pub sigma: Option<f64>,
    pub split: String,
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    Clean,
    Adversarial { epsilon: f64 },
}

/// Dense feature matrix (n x d) with provenance.
#[derive(Debug, Clone)]
pub struct RepresentationBatch {
    pub features: Array2<f64>,
    pub meta: RepresentationMeta,
}

impl RepresentationBatch {
    pub fn new(features: Array2<f64>, meta: RepresentationMeta) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("representation-batch", "non-finite entry"));
        }
        Ok(RepresentationBatch { features, meta })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    /// Persist as an activation dump.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "activation-dump",
            "meta": serde_json::to_value(&self.meta).unwrap(),
        });
        let mut w = ArchiveWriter::new(meta);
        w.put_f64("features", &self.features.clone().into_dyn());
        w.write_to(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let archive = Archive::open(path)?;
        let meta: RepresentationMeta =
            serde_json::from_value(archive.metadata()["meta"].clone()).map_err(|e| {
                Error::Archive {
                    path: path.to_path_buf(),
                    msg: format!("bad activation meta: {e}"),
                }
            })?;
        let features = archive
            .get_f64("features")?
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::shape("rank-2 features", "other"))?;
        RepresentationBatch::new(features, meta)
    }
}

/// Row-normalize to the unit sphere; zero rows stay zero.
fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Mean squared distance between normalized positive pairs (row i of `a`
/// with row i of `b`); lower means better aligned.
pub fn alignment_metric(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::argument("alignment needs row-aligned batches"));
    }
    let (ua, ub) = (normalize_rows(a), normalize_rows(b));
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        acc += ua
            .row(i)
            .iter()
            .zip(ub.row(i).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(acc / n as f64)
}

/// log mean over ordered distinct pairs of exp(-t * ||u - v||^2) on the unit
/// sphere. Higher (closer to 0 from below... no: less negative) values mean
/// a LESS uniform batch; fully collapsed batches reach the maximum 0.
pub fn uniformity_metric(features: &Array2<f64>, t: f64) -> Result<f64> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::argument("uniformity needs at least two rows"));
    }
    if t <= 0.0 {
        return Err(Error::argument("uniformity temperature must be positive"));
    }
    let u = normalize_rows(features);
    let mut acc = 0.0;
    let mut count = 0_usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2 = u
                .row(i)
                .iter()
                .zip(u.row(j).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
            acc += (-t * d2).exp();
            count += 1;
        }
    }
    Ok((acc / count as f64).ln())
}

/// Mutual-kNN-restricted kernel alignment between two row-aligned feature
/// sets.
///
/// Formula (recorded verbatim in report headers so scores stay comparable
/// within this toolkit): rows are L2-normalized; G_a and G_b are the Gram
/// matrices of the normalized rows; M_a(i,j) = 1 iff j != i is among the k
/// nearest neighbours of i in space a (M_b likewise); the cross term
/// restricts to the intersection mask M = M_a .* M_b,
///   score = sym-HSIC(M .* G_a, M .* G_b)
///           / sqrt(HSIC(M_a .* G_a, M_a .* G_a) * HSIC(M_b .* G_b, M_b .* G_b)),
/// with the unbiased HSIC estimator (centering happens inside HSIC; the
/// cross term is symmetrized over argument order), clamped to [0,1].
/// An empty intersection scores 0.
pub fn cknna(a: &Array2<f64>, b: &Array2<f64>, k: usize) -> Result<f64> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(Error::argument("cknna needs row-aligned batches"));
    }
    if n < 4 {
        return Err(Error::argument(
            "cknna needs at least 4 rows for the unbiased estimator",
        ));
    }
    if k == 0 || k >= n {
        return Err(Error::argument("cknna needs 1 <= k < n"));
    }
    let ua = normalize_rows(a);
    let ub = normalize_rows(b);
    let ga = ua.dot(&ua.t());
    let gb = ub.dot(&ub.t());

    let topk_mask = |g: &Array2<f64>| -> Vec<Vec<bool>> {
        (0..n)
            .map(|i| {
                let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                idx.sort_by(|&x, &y| {
                    g[[i, y]]
                        .partial_cmp(&g[[i, x]])
                        .expect("finite similarities")
                        .then(x.cmp(&y))
                });
                let mut row = vec![false; n];
                for &j in idx.iter().take(k) {
                    row[j] = true;
                }
                row
            })
            .collect()
    };
    let na = topk_mask(&ga);
    let nb = topk_mask(&gb);

    let apply_mask = |g: &Array2<f64>, keep: &dyn Fn(usize, usize) -> bool| -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j && keep(i, j) {
                    out[[i, j]] = g[[i, j]];
                }
            }
        }
        out
    };
    let cross_a = apply_mask(&ga, &|i, j| na[i][j] && nb[i][j]);
    let cross_b = apply_mask(&gb, &|i, j| na[i][j] && nb[i][j]);
    let own_a = apply_mask(&ga, &|i, j| na[i][j]);
    let own_b = apply_mask(&gb, &|i, j| nb[i][j]);

    let haa = hsic_unbiased(&own_a, &own_a);
    let hbb = hsic_unbiased(&own_b, &own_b);
    if haa <= 0.0 || hbb <= 0.0 {
        return Ok(0.0);
    }
    let hab = 0.5 * (hsic_unbiased(&cross_a, &cross_b) + hsic_unbiased(&cross_b, &cross_a));
    Ok((hab / (haa * hbb).sqrt()).clamp(0.0, 1.0))
}

/// Unbiased HSIC estimator (diagonals zeroed; centering is internal).
fn hsic_unbiased(k: &Array2<f64>, l: &Array2<f64>) -> f64 {
    let n = k.nrows();
    let m = n as f64;
    let mut kt = k.clone();
    let mut lt = l.clone();
    for i in 0..n {
        kt[[i, i]] = 0.0;
        lt[[i, i]] = 0.0;
    }
    let prod = kt.dot(&lt);
    let trace: f64 = (0..n).map(|i| prod[[i, i]]).sum();
    let sum_k: f64 = kt.sum();
    let sum_l: f64 = lt.sum();
    let sum_prod: f64 = prod.sum();
    (trace + sum_k * sum_l / ((m - 1.0) * (m - 2.0)) - 2.0 * sum_prod / (m - 2.0))
        / (m * (m - 3.0))
}

/// One serialized metric record inside an [`AnalysisReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub metric: String,
    pub params: serde_json::Value,
    pub value: serde_json::Value,
}

/// Serialized metric results keyed by run id.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AnalysisReport {
    pub run_id: String,
    pub records: Vec<AnalysisRecord>,
}

impl AnalysisReport {
    pub fn new(run_id: impl Into<String>) -> Self {
        AnalysisReport {
            run_id: run_id.into(),
            records: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        metric: impl Into<String>,
        params: serde_json::Value,
        value: serde_json::Value,
    ) {
        self.records.push(AnalysisRecord {
            metric: metric.into(),
            params,
            value,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_array, substream};
    use approx::assert_abs_diff_eq;

    #[test]
    fn alignment_identities_and_oracle() {
        let mut rng = substream(70, "align", 0);
        let a: Array2<f64> = normal_array(&mut rng, (8, 5));
        assert_abs_diff_eq!(alignment_metric(&a, &a).unwrap(), 0.0, epsilon = 1e-15);

        // Antipodal unit vectors: squared distance 4 per row.
        let b = a.mapv(|v| -v);
        assert_abs_diff_eq!(alignment_metric(&a, &b).unwrap(), 4.0, epsilon = 1e-12);

        // Brute-force per-row loop oracle on random pairs.
        let c: Array2<f64> = normal_array(&mut rng, (8, 5));
        let got = alignment_metric(&a, &c).unwrap();
        let norm = |row: ndarray::ArrayView1<f64>| -> Vec<f64> {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        };
        let mut oracle = 0.0;
        for i in 0..8 {
            let u = norm(a.row(i));
            let v = norm(c.row(i));
            oracle += u
                .iter()
                .zip(v.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        oracle /= 8.0;
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-10);

        assert!(alignment_metric(&a, &normal_array(&mut rng, (5, 5))).is_err());
    }

    #[test]
    fn uniformity_identities_and_oracle() {
        // Collapsed batch: log exp(0) = 0.
        let collapsed = Array2::from_elem((4, 3), 0.5);
        assert_abs_diff_eq!(uniformity_metric(&collapsed, 2.0).unwrap(), 0.0, epsilon = 1e-12);

        // Two antipodal unit vectors at t = 2: log exp(-2*4) = -8.
        let anti = ndarray::array![[1.0, 0.0], [-1.0, 0.0]];
        assert_abs_diff_eq!(uniformity_metric(&anti, 2.0).unwrap(), -8.0, epsilon = 1e-12);

        // O(n^2) pair-loop oracle.
        let mut rng = substream(71, "unif", 0);
        let x: Array2<f64> = normal_array(&mut rng, (10, 4));
        let got = uniformity_metric(&x, 2.0).unwrap();
        let u = normalize_rows(&x);
        let mut acc = 0.0;
        let mut cnt = 0;
        for i in 0..10 {
            for j in 0..10 {
                if i != j {
                    let d2: f64 = u
                        .row(i)
                        .iter()
                        .zip(u.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    acc += (-2.0 * d2).exp();
                    cnt += 1;
                }
            }
        }
        assert_abs_diff_eq!(got, (acc / cnt as f64).ln(), epsilon = 1e-10);

        let one = Array2::from_elem((1, 3), 1.0);
        assert!(uniformity_metric(&one, 2.0).is_err());
    }

    #[test]
    fn metrics_are_rotation_invariant() {
        let mut rng = substream(72, "rot", 0);
        let a: Array2<f64> = normal_array(&mut rng, (12, 6));
        let b: Array2<f64> = normal_array(&mut rng, (12, 6));
        let q = random_orthogonal(6, &mut rng);
        let ar = a.dot(&q);
        let br = b.dot(&q);
        assert_abs_diff_eq!(
            alignment_metric(&a, &b).unwrap(),
            alignment_metric(&ar, &br).unwrap(),
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            uniformity_metric(&a, 2.0).unwrap(),
            uniformity_metric(&ar, 2.0).unwrap(),
            epsilon = 1e-10
        );
    }

    fn random_orthogonal(d: usize, rng: &mut crate::rng::Stream) -> Array2<f64> {
        // Gram-Schmidt on a random Gaussian matrix.
        let g: Array2<f64> = normal_array(rng, (d, d));
        let mut q = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            let mut v: Vec<f64> = g.row(i).to_vec();
            for j in 0..i {
                let dot: f64 = (0..d).map(|c| v[c] * q[[j, c]]).sum();
                for c in 0..d {
                    v[c] -= dot * q[[j, c]];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for c in 0..d {
                q[[i, c]] = v[c] / norm;
            }
        }
        q
    }

    #[test]
    fn cknna_self_alignment_and_symmetry() {
        let mut rng = substream(73, "cknna", 0);
        let a: Array2<f64> = normal_array(&mut rng, (20, 6));
        for k in [1, 5, 10, 19] {
            assert_abs_diff_eq!(cknna(&a, &a, k).unwrap(), 1.0, epsilon = 1e-12);
        }
        let b: Array2<f64> = normal_array(&mut rng, (20, 6));
        assert_abs_diff_eq!(
            cknna(&a, &b, 5).unwrap(),
            cknna(&b, &a, 5).unwrap(),
            epsilon = 1e-12
        );
        assert!(cknna(&a, &b, 0).is_err());
        assert!(cknna(&a, &b, 20).is_err());
    }

    #[test]
    fn cknna_rotation_invariance() {
        let mut rng = substream(74, "cknna-rot", 0);
        let a: Array2<f64> = normal_array(&mut rng, (24, 6));
        let q = random_orthogonal(6, &mut rng);
        let rotated = a.dot(&q);
        let s = cknna(&a, &rotated, 8).unwrap();
        assert!((s - 1.0).abs() < 1e-8, "rotated score {s}");
    }

    #[test]
    fn cknna_null_band_for_independent_features() {
        for seed in 0..5 {
            let mut rng = substream(75, "cknna-null", seed);
            let a: Array2<f64> = normal_array(&mut rng, (500, 16));
            let b: Array2<f64> = normal_array(&mut rng, (500, 16));
            let s = cknna(&a, &b, 10).unwrap();
            assert!(s < 0.1, "seed {seed}: null score {s}");
        }
    }

    #[test]
    fn representation_batch_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = substream(76, "repr-io", 0);
        let feats: Array2<f64> = normal_array(&mut rng, (6, 4));
        let batch = RepresentationBatch::new(
            feats.clone(),
            RepresentationMeta {
                model_id: "m1".into(),
                layer: "bottleneck-pre-upsample".into(),
                sigma: Some(0.1),
                split: "test".into(),
                perturbation: Perturbation::Adversarial { epsilon: 8.0 / 255.0 },
            },
        )
        .unwrap();
        let path = dir.path().join("acts.dra");
        batch.save(&path).unwrap();
        let loaded = RepresentationBatch::load(&path).unwrap();
        assert_eq!(loaded.features, feats);
        assert_eq!(loaded.meta, batch.meta);

        let bad = Array2::from_elem((2, 2), f64::NAN);
        assert!(RepresentationBatch::new(bad, batch.meta.clone()).is_err());
    }
}
