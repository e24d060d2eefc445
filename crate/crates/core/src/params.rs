//! Named parameter arrays: the unit of checkpointing, gradient checking and
//! weight-space ensembling.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::config::hex_digest;
use crate::error::{Result, SimvaError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub tensor: Tensor,
    /// On-disk precision. `F32` arrays hold values exactly representable in
    /// `f32` so that save/load is lossless.
    pub dtype: DType,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub config_hash: Option<String>,
    pub step: u64,
    /// Free-form provenance (blend ratios, source hashes, clip ids, ...).
    #[serde(default)]
    pub extra: IndexMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    arrays: IndexMap<String, ParamArray>,
    pub metadata: StoreMetadata,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.insert_with_dtype(name, tensor, DType::F64)
    }

    pub fn insert_with_dtype(&mut self, name: impl Into<String>, tensor: Tensor, dtype: DType) -> Result<()> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return Err(SimvaError::validation(format!("parameter `{name}` registered twice")));
        }
        if dtype == DType::F32 && tensor.data().iter().any(|&x| (x as f32) as f64 != x && x.is_finite()) {
            return Err(SimvaError::validation(format!(
                "`{name}` tagged f32 holds values not representable in f32"
            )));
        }
        self.arrays.insert(name, ParamArray { tensor, dtype });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .map(|a| &a.tensor)
            .ok_or_else(|| self.unknown(name))
    }

    pub fn array(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.get(name)
    }

    /// Mutable access to values. The shape is fixed after creation.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        if !self.arrays.contains_key(name) {
            return Err(self.unknown(name));
        }
        Ok(self.arrays.get_mut(name).expect("checked").tensor.data_mut())
    }

    fn unknown(&self, name: &str) -> SimvaError {
        SimvaError::UnknownKey {
            key: name.to_string(),
            available: self.arrays.keys().cloned().collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamArray)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.tensor.len()).sum()
    }

    /// Hex SHA-256 over names, dtypes, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (name, a) in &self.arrays {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            bytes.push(a.dtype.size() as u8);
            for &d in a.tensor.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in a.tensor.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        hex_digest(&bytes)
    }

    /// Put every array on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), tape.param(a.tensor.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Same layout as `self`, all zeros.
    pub fn zeros_like(&self) -> ParameterStore {
        let arrays = self
            .arrays
            .iter()
            .map(|(k, a)| {
                (
                    k.clone(),
                    ParamArray {
                        tensor: Tensor::zeros(a.tensor.shape().to_vec()),
                        dtype: DType::F64,
                    },
                )
            })
            .collect();
        ParameterStore {
            arrays,
            metadata: StoreMetadata::default(),
        }
    }

    /// Names present in exactly one store, or present in both with
    /// different shapes.
    pub fn structural_diff(&self, other: &ParameterStore) -> Vec<String> {
        let mut diff: Vec<String> = self
            .arrays
            .iter()
            .filter(|(k, a)| {
                other
                    .arrays
                    .get(*k)
                    .is_none_or(|b| b.tensor.shape() != a.tensor.shape())
            })
            .map(|(k, _)| k.clone())
            .collect();
        diff.extend(other.arrays.keys().filter(|k| !self.arrays.contains_key(*k)).cloned());
        diff
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.arrays.iter().find(|(_, a)| !a.tensor.all_finite()) {
            Some((k, _)) => Err(k.clone()),
            None => Ok(()),
        }
    }
}

/// Parameters placed on a tape, looked up by name.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| SimvaError::UnknownKey {
            key: name.to_string(),
            available: self.vars.keys().cloned().collect(),
        })
    }

    /// Collect gradients into a store with the same layout as `like`;
    /// parameters the loss does not touch get zero gradient.
    pub fn gradients(&self, grads: &mut Gradients, like: &ParameterStore) -> ParameterStore {
        let mut out = like.zeros_like();
        for (name, &v) in &self.vars {
            if let Some(g) = grads.take(v) {
                out.arrays.get_mut(name).expect("same layout").tensor = g;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros([2])).unwrap();
        assert!(s.insert("a", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn unknown_key_lists_available() {
        let mut s = ParameterStore::new();
        s.insert("a.b", Tensor::zeros([1])).unwrap();
        let err = s.get("nope").unwrap_err().to_string();
        assert!(err.contains("a.b"), "{err}");
    }

    #[test]
    fn structural_diff_reports_both_sides() {
        let mut a = ParameterStore::new();
        a.insert("x", Tensor::zeros([2])).unwrap();
        a.insert("y", Tensor::zeros([2])).unwrap();
        let mut b = ParameterStore::new();
        b.insert("x", Tensor::zeros([3])).unwrap();
        b.insert("z", Tensor::zeros([1])).unwrap();
        let mut d = a.structural_diff(&b);
        d.sort();
        assert_eq!(d, vec!["x", "y", "z"]);
    }

    #[test]
    fn f32_tag_requires_representable_values() {
        let mut s = ParameterStore::new();
        assert!(s.insert_with_dtype("a", Tensor::full([1], 0.1), DType::F32).is_err());
        s.insert_with_dtype("b", Tensor::full([1], 0.1f32 as f64), DType::F32).unwrap();
    }
}
