//! Named parameter storage and the JSON tensor manifest used for checkpoints.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Never updated.
    Frozen,
    /// Prompt generator, prompt tables and projections into/out of the encoder.
    LanguageSide,
    /// Graph encoder, relevance scorer and reasoning head.
    Graph,
    /// Non-trainable state written by forward passes (normalization statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub group: Group,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    Shape { name: String, expected: [usize; 2], found: [usize; 2] },
    #[error("tensor {name}: {len} values for shape {shape:?}")]
    Length { name: String, shape: [usize; 2], len: usize },
    #[error("tensor {0} missing from manifest")]
    Missing(String),
}

/// One tensor of a checkpoint: `{name, shape, data}` with row-major data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Only `LanguageSide` and `Graph` parameters start trainable.
    ///
    /// Panics on a duplicate name; parameter names are fixed by model code.
    pub fn add(&mut self, name: impl Into<String>, value: Mat, group: Group) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, group, trainable: matches!(group, Group::LanguageSide | Group::Graph) });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.shape(), value.shape(), "shape change for {}", p.name);
        p.value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.params[id.0].group
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Number of scalar values across the given parameters.
    pub fn count_values(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    pub fn to_manifest(&self) -> Vec<TensorEntry> {
        self.params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: [p.value.rows(), p.value.cols()],
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites every parameter from `entries`. All names must be present
    /// with matching shapes; extra entries are ignored.
    pub fn load_manifest(&mut self, entries: &[TensorEntry]) -> Result<(), ManifestError> {
        let by_name: HashMap<&str, &TensorEntry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut staged = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let e = by_name.get(p.name.as_str()).ok_or_else(|| ManifestError::Missing(p.name.clone()))?;
            let expected = [p.value.rows(), p.value.cols()];
            if e.shape != expected {
                return Err(ManifestError::Shape { name: p.name.clone(), expected, found: e.shape });
            }
            if e.data.len() != e.shape[0] * e.shape[1] {
                return Err(ManifestError::Length { name: p.name.clone(), shape: e.shape, len: e.data.len() });
            }
            staged.push(Mat::from_vec(e.shape[0], e.shape[1], e.data.clone()));
        }
        for (p, v) in self.params.iter_mut().zip(staged) {
            p.value = v;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string(&self.to_manifest())?;
        fs::write(path, text).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
    }

    pub fn load_json(&mut self, path: &Path) -> Result<(), ManifestError> {
        let text =
            fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        let entries: Vec<TensorEntry> = serde_json::from_str(&text)?;
        self.load_manifest(&entries)
    }

    /// Copies of the current values, in id order.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Mat> {
        ids.iter().map(|&id| self.get(id).clone()).collect()
    }

    pub fn restore(&mut self, ids: &[ParamId], values: &[Mat]) {
        for (&id, v) in ids.iter().zip(values) {
            self.set(id, v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_shape_check() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]), Group::Graph);
        store.add("frozen", Mat::zeros(1, 3), Group::Frozen);
        assert!(!store.is_trainable(store.find("frozen").unwrap()));
        let manifest = store.to_manifest();

        let mut other = store.clone();
        other.set(a, Mat::zeros(2, 2));
        other.load_manifest(&manifest).unwrap();
        assert_eq!(other.get(a), store.get(a));

        let mut bad = manifest.clone();
        bad[0].shape = [4, 1];
        assert!(matches!(other.load_manifest(&bad), Err(ManifestError::Shape { .. })));
        assert!(matches!(other.load_manifest(&manifest[1..]), Err(ManifestError::Missing(_))));
    }
}
