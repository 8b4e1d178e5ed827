//! Named parameter collections.
//!
//! Models keep their weights in a [`ParamSet`]: an insertion-ordered map of
//! named f64 tensors. Optimizer updates, EMA folds, checkpoint IO, and the
//! finite-difference harness all operate on this one structure, so every
//! consumer sees parameters in the same canonical order.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::archive::{Archive, ArchiveWriter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    map: IndexMap<String, ArrayD<f64>>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of scalar parameters across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Same names, same order, same shapes.
    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(other.map.iter())
                .all(|((an, av), (bn, bv))| an == bn && av.shape() == bv.shape())
    }

    fn require_congruent(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.congruent(other) {
            Ok(())
        } else {
            Err(Error::argument(format!(
                "{what}: parameter trees are not congruent"
            )))
        }
    }

    /// A congruent set with every tensor zeroed; gradient accumulators start here.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.map {
            out.map.insert(k.clone(), ArrayD::zeros(v.raw_dim()));
        }
        out
    }

    /// self += scale * other, element-wise.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.require_congruent(other, "add_scaled")?;
        for (a, b) in self.map.values_mut().zip(other.map.values()) {
            a.zip_mut_with(b, |x, &y| *x += scale * y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.map.values_mut() {
            v.mapv_inplace(|x| x * s);
        }
    }

    /// Flatten every tensor into one vector (canonical order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in self.map.values() {
            out.extend(v.iter().copied());
        }
        out
    }

    /// Overwrite all tensors from a flat vector (canonical order).
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat length mismatch");
        let mut i = 0;
        for v in self.map.values_mut() {
            for x in v.iter_mut() {
                *x = flat[i];
                i += 1;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Store every tensor under `prefix/<name>` in an archive.
    pub fn save_into(&self, writer: &mut ArchiveWriter, prefix: &str) {
        for (k, v) in &self.map {
            writer.put_f64(&format!("{prefix}/{k}"), v);
        }
    }

    /// Load tensors previously written by [`save_into`]; the receiver's
    /// structure defines which names are expected.
    pub fn load_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for (k, v) in self.map.iter_mut() {
            let loaded = archive.get_f64(&format!("{prefix}/{k}"))?;
            if loaded.shape() != v.shape() {
                return Err(Error::shape(
                    format!("{prefix}/{k} {:?}", v.shape()),
                    format!("{:?}", loaded.shape()),
                ));
            }
            *v = loaded;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0_f64, 2.0], [3.0, 4.0]].into_dyn());
        p.insert("b", array![0.5_f64, -0.5].into_dyn());
        p
    }

    #[test]
    fn flatten_roundtrip() {
        let mut p = sample();
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        let mut flat2 = flat.clone();
        flat2[2] = 9.0;
        p.assign_flat(&flat2);
        assert_eq!(p.get("w")[[1, 0]], 9.0);
    }

    #[test]
    fn add_scaled_requires_congruence() {
        let mut p = sample();
        let g = p.zeros_like();
        assert!(p.add_scaled(&g, 0.1).is_ok());
        let mut other = ParamSet::new();
        other.insert("w", array![1.0_f64].into_dyn());
        assert!(p.add_scaled(&other, 0.1).is_err());
    }

    #[test]
    fn archive_roundtrip() {
        let p = sample();
        let mut w = ArchiveWriter::new(serde_json::Value::Null);
        p.save_into(&mut w, "live");
        let bytes = w.to_bytes().unwrap();
        let a = Archive::from_bytes(bytes, "mem".into()).unwrap();
        let mut q = sample();
        q.scale(0.0);
        q.load_from(&a, "live").unwrap();
        assert_eq!(p, q);
    }
}
