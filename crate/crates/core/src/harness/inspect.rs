//! Read-only summaries of checkpoints and dumps of intermediate volumes.

use std::fmt::Write;

use indexmap::IndexMap;

use crate::error::{Result, SimvaError};
use crate::features::{EncodedVideo, TextEmbeddingSet};
use crate::model::SimVa;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// One line per array: name, shape, dtype and L2 norm.
pub fn summarize_store(store: &ParameterStore) -> String {
    let mut out = String::new();
    for (name, a) in store.iter() {
        let _ = writeln!(
            out,
            "{name:<48} {:<18} {:?} norm={:.6e}",
            format!("{:?}", a.tensor.shape()),
            a.dtype,
            a.tensor.norm()
        );
    }
    let _ = writeln!(out, "{} arrays, {} scalars", store.len(), store.num_scalars());
    out
}

/// Every array an inspect dump can contain for `video`, keyed by name:
/// `S`, `Z_0`, per layer `layers.{l}.Z_sa`, `layers.{l}.gamma`,
/// `layers.{l}.Z_mod`, `layers.{l}.Z_ta`, and `logits`.
pub fn trace_arrays(model: &SimVa, video: &EncodedVideo, texts: &TextEmbeddingSet) -> Result<IndexMap<String, Tensor>> {
    let (_, trace) = model.trace(video, texts)?;
    let mut out = IndexMap::new();
    out.insert("S".to_string(), trace.similarity);
    let mut gains = trace.gains.into_iter();
    for (name, t) in trace.stages {
        if let Some(layer) = name.strip_suffix(".Z_mod") {
            if let Some(g) = gains.next() {
                out.insert(format!("{layer}.gamma"), g);
            }
        }
        out.insert(name, t);
    }
    out.insert("logits".to_string(), trace.logits);
    Ok(out)
}

/// Select `keys` (all when empty) into a store for saving with the
/// checkpoint container.
pub fn dump(arrays: &IndexMap<String, Tensor>, keys: &[String]) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    let wanted: Vec<&String> = if keys.is_empty() { arrays.keys().collect() } else { keys.iter().collect() };
    for k in wanted {
        let t = arrays.get(k).ok_or_else(|| SimvaError::UnknownKey {
            key: k.clone(),
            available: arrays.keys().cloned().collect(),
        })?;
        store.insert(k.clone(), t.clone())?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::harness::gradcheck::random_problem;

    #[test]
    fn trace_keys_and_ranges() {
        let p = random_problem(&ModelConfig::tiny(), 7, 2).unwrap();
        let a = trace_arrays(&p.model, &p.video, &p.texts).unwrap();
        for k in ["S", "Z_0", "layers.0.Z_sa", "layers.0.gamma", "layers.1.Z_ta", "logits"] {
            assert!(a.contains_key(k), "{k}");
        }
        assert!(a["S"].data().iter().all(|s| s.abs() <= 1.0));
        let err = dump(&a, &["nope".into()]).unwrap_err();
        match err {
            SimvaError::UnknownKey { key, available } => {
                assert_eq!(key, "nope");
                assert!(available.contains(&"S".to_string()));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn summary_lists_every_array() {
        let p = random_problem(&ModelConfig::tiny(), 7, 2).unwrap();
        let s = summarize_store(&p.model.params);
        assert_eq!(s.lines().count(), p.model.params.len() + 1);
        assert!(s.contains("head.linear.weight"));
    }
}
