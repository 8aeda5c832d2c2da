//! Low-rank adapter merging over named-tensor archives.
//!
//! A rank-`r` adapter for a `d x k` weight is a pair of factors `B (d x r)`
//! and `A (r x k)` plus a scale numerator `alpha`. Merging folds the adapter
//! into the base weight:
//!
//! ```text
//! W' = W + (alpha / r) * B A
//! ```
//!
//! Inside an archive, the factors for target tensor `t` live under
//! `t.lora_b` / `t.lora_a`; [`adapters_from_archive`] collects them. Merged
//! archives carry a manifest under the `merge` meta key recording every
//! target name and its applied scale.

use ndarray::Array2;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};

/// One low-rank adapter: `B (d x r)`, `A (r x k)`, and its scale parameters.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub b: Array2<f64>,
    pub a: Array2<f64>,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    /// Validate internal consistency (factor shapes against `rank`, positive
    /// `alpha`). `name` only decorates error messages.
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config(format!("adapter '{name}': rank must be >= 1")));
        }
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(Error::config(format!(
                "adapter '{name}': alpha must be a positive real, got {}",
                self.alpha
            )));
        }
        if self.b.ncols() != self.rank || self.a.nrows() != self.rank {
            return Err(Error::shape(format!(
                "adapter '{name}': rank {} does not match factors B {:?} / A {:?}",
                self.rank,
                self.b.dim(),
                self.a.dim()
            )));
        }
        Ok(())
    }

    /// The scale applied to `B A` when merging: `alpha / rank`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Merge one adapter into one weight matrix: `W + (alpha / r) * B A`.
///
/// `name` labels the target tensor in error messages.
pub fn merge_lora(name: &str, w: &Array2<f64>, adapter: &LoraAdapter) -> Result<Array2<f64>> {
    adapter.validate(name)?;
    let (d, k) = w.dim();
    if adapter.b.nrows() != d || adapter.a.ncols() != k {
        return Err(Error::shape(format!(
            "adapter '{name}': B {:?} x A {:?} does not match base weight {:?}",
            adapter.b.dim(),
            adapter.a.dim(),
            w.dim()
        )));
    }
    let delta = adapter.b.dot(&adapter.a);
    Ok(w + &(delta * adapter.scaling()))
}

/// An adapter bound to the name of the tensor it updates.
#[derive(Debug, Clone)]
pub struct NamedAdapter {
    pub target: String,
    pub adapter: LoraAdapter,
}

/// Merge every adapter into its named target tensor.
///
/// Tensors without an adapter are copied bitwise. When at least one adapter
/// is merged, a manifest `{"merge": {"targets": [{name, alpha, rank, scale}]}}`
/// is attached to the output metadata; an empty adapter list returns an
/// archive identical to the input.
pub fn merge_model(base: &TensorArchive, adapters: &[NamedAdapter]) -> Result<TensorArchive> {
    let mut out = base.clone();
    if adapters.is_empty() {
        return Ok(out);
    }
    let mut manifest = Vec::new();
    for na in adapters {
        let entry = base.get(&na.target).ok_or_else(|| {
            Error::data(format!(
                "adapter targets missing tensor '{}' (archive has {} tensors)",
                na.target,
                base.len()
            ))
        })?;
        let w = entry
            .data
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| {
                Error::shape(format!(
                    "adapter target '{}' is not a matrix: shape {:?}",
                    na.target,
                    entry.data.shape()
                ))
            })?;
        let merged = merge_lora(&na.target, &w, &na.adapter)?;
        out.insert(na.target.clone(), merged.into_dyn(), entry.dtype);
        manifest.push(serde_json::json!({
            "name": na.target,
            "alpha": na.adapter.alpha,
            "rank": na.adapter.rank,
            "scale": na.adapter.scaling(),
        }));
    }
    out.meta.insert(
        "merge".into(),
        serde_json::json!({ "targets": manifest }),
    );
    Ok(out)
}

/// Collect adapters stored alongside their targets in `archive` using the
/// `<target>.lora_b` / `<target>.lora_a` naming convention. `alpha` and
/// `rank` apply to every collected pair.
pub fn adapters_from_archive(
    archive: &TensorArchive,
    alpha: f64,
    rank: usize,
) -> Result<Vec<NamedAdapter>> {
    let mut out = Vec::new();
    for (name, entry) in archive.iter() {
        let Some(target) = name.strip_suffix(".lora_b") else {
            continue;
        };
        let a_name = format!("{target}.lora_a");
        let a_entry = archive
            .get(&a_name)
            .ok_or_else(|| Error::data(format!("adapter archive has '{name}' but no '{a_name}'")))?;
        let b = entry
            .data
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::shape(format!("'{name}' is not a matrix")))?;
        let a = a_entry
            .data
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::shape(format!("'{a_name}' is not a matrix")))?;
        out.push(NamedAdapter {
            target: target.to_string(),
            adapter: LoraAdapter { b, a, alpha, rank },
        });
    }
    if out.is_empty() {
        return Err(Error::data(
            "adapter archive contains no '<target>.lora_b' / '<target>.lora_a' pairs",
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Dtype;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent elementwise oracle: plain triple loop, no ndarray matmul.
    fn naive_merge(w: &Array2<f64>, ad: &LoraAdapter) -> Array2<f64> {
        let (d, k) = w.dim();
        let scale = ad.alpha / ad.rank as f64;
        let mut out = w.clone();
        for i in 0..d {
            for j in 0..k {
                let mut acc = 0.0;
                for t in 0..ad.rank {
                    acc += ad.b[[i, t]] * ad.a[[t, j]];
                }
                out[[i, j]] += scale * acc;
            }
        }
        out
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn scalar_example() {
        let w = arr2(&[[2.0]]);
        let ad = LoraAdapter { b: arr2(&[[3.0]]), a: arr2(&[[4.0]]), alpha: 1.0, rank: 1 };
        let merged = merge_lora("w", &w, &ad).unwrap();
        assert_eq!(merged, arr2(&[[14.0]]));
    }

    #[test]
    fn paper_scales_are_unity() {
        let ad16 = LoraAdapter {
            b: Array2::zeros((4, 16)),
            a: Array2::zeros((16, 4)),
            alpha: 16.0,
            rank: 16,
        };
        let ad128 = LoraAdapter {
            b: Array2::zeros((4, 128)),
            a: Array2::zeros((128, 4)),
            alpha: 128.0,
            rank: 128,
        };
        assert_eq!(ad16.scaling(), 1.0);
        assert_eq!(ad128.scaling(), 1.0);
    }

    #[test]
    fn zero_factor_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_mat(&mut rng, 5, 3);
        let ad = LoraAdapter {
            b: Array2::zeros((5, 2)),
            a: rand_mat(&mut rng, 2, 3),
            alpha: 4.0,
            rank: 2,
        };
        let merged = merge_lora("w", &w, &ad).unwrap();
        // Not approx: every bit must survive adding an all-zero update.
        for (x, y) in w.iter().zip(merged.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let w = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let ad = LoraAdapter {
            b: Array2::zeros((3, 1)),
            a: Array2::zeros((1, 2)),
            alpha: 1.0,
            rank: 1,
        };
        let err = merge_lora("enc.q_proj", &w, &ad).unwrap_err();
        assert!(err.to_string().contains("enc.q_proj"), "got: {err}");
    }

    #[test]
    fn rank_zero_rejected() {
        let w = arr2(&[[1.0]]);
        let ad = LoraAdapter {
            b: Array2::zeros((1, 0)),
            a: Array2::zeros((0, 1)),
            alpha: 1.0,
            rank: 0,
        };
        assert!(merge_lora("w", &w, &ad).is_err());
    }

    #[test]
    fn merge_agrees_with_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let d = rng.gen_range(1..8);
            let k = rng.gen_range(1..8);
            let r = rng.gen_range(1..4);
            let w = rand_mat(&mut rng, d, k);
            let ad = LoraAdapter {
                b: rand_mat(&mut rng, d, r),
                a: rand_mat(&mut rng, r, k),
                alpha: rng.gen_range(0.5..32.0),
                rank: r,
            };
            let got = merge_lora("w", &w, &ad).unwrap();
            let want = naive_merge(&w, &ad);
            for (x, y) in got.iter().zip(want.iter()) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn merge_is_linear_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let w = rand_mat(&mut rng, 4, 6);
            let b = rand_mat(&mut rng, 4, 2);
            let a = rand_mat(&mut rng, 2, 6);
            let alpha = rng.gen_range(0.25..8.0);
            let m1 = merge_lora(
                "w",
                &w,
                &LoraAdapter { b: b.clone(), a: a.clone(), alpha, rank: 2 },
            )
            .unwrap();
            let m2 = merge_lora(
                "w",
                &w,
                &LoraAdapter { b: b.clone(), a: a.clone(), alpha: 2.0 * alpha, rank: 2 },
            )
            .unwrap();
            let d1 = &m1 - &w;
            let d2 = &m2 - &w;
            for (x, y) in d2.iter().zip(d1.iter()) {
                assert!((x - 2.0 * y).abs() <= 1e-12, "{x} vs 2*{y}");
            }
        }
    }

    #[test]
    fn merge_model_empty_list_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut base = TensorArchive::new();
        base.insert("w1", rand_mat(&mut rng, 3, 3).into_dyn(), Dtype::F32);
        base.insert("w2", rand_mat(&mut rng, 2, 5).into_dyn(), Dtype::F32);
        let merged = merge_model(&base, &[]).unwrap();
        assert_eq!(base.to_bytes(), merged.to_bytes());
    }

    #[test]
    fn merge_model_matches_per_entry_merges_and_copies_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n_tensors = rng.gen_range(1..5);
            let mut base = TensorArchive::new();
            let mut dims = Vec::new();
            for i in 0..n_tensors {
                let d = rng.gen_range(1..6);
                let k = rng.gen_range(1..6);
                base.insert(format!("t{i}"), rand_mat(&mut rng, d, k).into_dyn(), Dtype::F32);
                dims.push((d, k));
            }
            // Adapt a random subset.
            let mut adapters = Vec::new();
            for (i, &(d, k)) in dims.iter().enumerate() {
                if rng.gen_bool(0.6) {
                    let r = rng.gen_range(1..3);
                    adapters.push(NamedAdapter {
                        target: format!("t{i}"),
                        adapter: LoraAdapter {
                            b: rand_mat(&mut rng, d, r),
                            a: rand_mat(&mut rng, r, k),
                            alpha: rng.gen_range(0.5..4.0),
                            rank: r,
                        },
                    });
                }
            }
            let merged = merge_model(&base, &adapters).unwrap();
            for (i, _) in dims.iter().enumerate() {
                let name = format!("t{i}");
                let got = &merged.get(&name).unwrap().data;
                if let Some(na) = adapters.iter().find(|na| na.target == name) {
                    let w = base
                        .get(&name)
                        .unwrap()
                        .data
                        .clone()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let want = merge_lora(&name, &w, &na.adapter).unwrap().into_dyn();
                    assert_eq!(got, &want, "merged '{name}' differs from per-entry oracle");
                } else {
                    // Untouched tensors must be copied bit-for-bit.
                    let want = &base.get(&name).unwrap().data;
                    for (x, y) in got.iter().zip(want.iter()) {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
            }
            if !adapters.is_empty() {
                let manifest = &merged.meta["merge"]["targets"];
                assert_eq!(manifest.as_array().unwrap().len(), adapters.len());
            }
        }
    }

    #[test]
    fn unknown_target_errors() {
        let base = TensorArchive::new();
        let adapters = [NamedAdapter {
            target: "nope".into(),
            adapter: LoraAdapter {
                b: Array2::zeros((1, 1)),
                a: Array2::zeros((1, 1)),
                alpha: 1.0,
                rank: 1,
            },
        }];
        let err = merge_model(&base, &adapters).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn adapters_from_archive_pairs_factors() {
        let mut arch = TensorArchive::new();
        arch.insert("enc.w.lora_b", Array2::<f64>::zeros((4, 2)).into_dyn(), Dtype::F32);
        arch.insert("enc.w.lora_a", Array2::<f64>::zeros((2, 3)).into_dyn(), Dtype::F32);
        let ads = adapters_from_archive(&arch, 16.0, 2).unwrap();
        assert_eq!(ads.len(), 1);
        assert_eq!(ads[0].target, "enc.w");

        let mut missing = TensorArchive::new();
        missing.insert("enc.w.lora_b", Array2::<f64>::zeros((4, 2)).into_dyn(), Dtype::F32);
        assert!(adapters_from_archive(&missing, 16.0, 2).is_err());
    }
}
