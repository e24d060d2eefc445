//! Weight-space ensembling: elementwise interpolation of two parameter
//! stores with identical layout.

use serde_json::json;

use crate::error::{Result, SimvaError};
use crate::params::ParameterStore;

/// Default blend ratio towards the fine-tuned weights.
pub const DEFAULT_BETA: f64 = 0.8;

/// `(1 - beta) * base + beta * tuned` for every array, or only for arrays
/// whose name starts with `prefix` (others are copied from `base`).
///
/// The result's metadata records `beta` and the content hashes of both
/// inputs under `extra.wse`.
pub fn wse_blend_filtered(
    base: &ParameterStore,
    tuned: &ParameterStore,
    beta: f64,
    prefix: Option<&str>,
) -> Result<ParameterStore> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(SimvaError::validation(format!("beta must lie in [0, 1], got {beta}")));
    }
    let diff = base.structural_diff(tuned);
    if !diff.is_empty() {
        return Err(SimvaError::Structural { keys: diff });
    }
    let mut out = base.clone();
    for (name, t) in tuned.iter() {
        if prefix.is_some_and(|p| !name.starts_with(p)) {
            continue;
        }
        let dst = out.values_mut(name)?;
        for (d, &b) in dst.iter_mut().zip(t.tensor.data()) {
            // Exact endpoints: beta = 0 keeps base, beta = 1 copies tuned.
            *d = if beta == 0.0 {
                *d
            } else if beta == 1.0 {
                b
            } else {
                (1.0 - beta) * *d + beta * b
            };
        }
    }
    out.metadata.extra.insert(
        "wse".into(),
        json!({
            "beta": beta,
            "base_hash": base.content_hash(),
            "tuned_hash": tuned.content_hash(),
            "prefix": prefix,
        }),
    );
    Ok(out)
}

pub fn wse_blend(base: &ParameterStore, tuned: &ParameterStore, beta: f64) -> Result<ParameterStore> {
    wse_blend_filtered(base, tuned, beta, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[(&str, f64)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (k, v) in vals {
            s.insert(*k, Tensor::full([2], *v)).unwrap();
        }
        s
    }

    #[test]
    fn endpoints_and_default_ratio() {
        let a = store(&[("x", 1.0), ("y", 0.1)]);
        let b = store(&[("x", 2.0), ("y", 0.7)]);
        let at = |s: &ParameterStore, k: &str| s.get(k).unwrap().data().to_vec();
        assert_eq!(at(&wse_blend(&a, &b, 0.0).unwrap(), "y"), at(&a, "y"));
        assert_eq!(at(&wse_blend(&a, &b, 1.0).unwrap(), "y"), at(&b, "y"));
        let m = wse_blend(&a, &b, DEFAULT_BETA).unwrap();
        assert!((m.get("x").unwrap().data()[0] - 1.8).abs() < 1e-12);
        assert_eq!(m.metadata.extra["wse"]["beta"], json!(0.8));
    }

    #[test]
    fn prefix_filter_copies_other_arrays() {
        let a = store(&[("enc.w", 1.0), ("head.w", 1.0)]);
        let b = store(&[("enc.w", 3.0), ("head.w", 3.0)]);
        let m = wse_blend_filtered(&a, &b, 0.5, Some("enc.")).unwrap();
        assert_eq!(m.get("enc.w").unwrap().data()[0], 2.0);
        assert_eq!(m.get("head.w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn mismatch_lists_keys() {
        let a = store(&[("x", 1.0), ("y", 1.0)]);
        let b = store(&[("x", 1.0), ("z", 1.0)]);
        match wse_blend(&a, &b, 0.5) {
            Err(SimvaError::Structural { keys }) => assert_eq!(keys, vec!["y", "z"]),
            other => panic!("{other:?}"),
        }
    }
}
